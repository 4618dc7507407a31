//! The assembled model: encoder, length perceiver and classifier, quality
//! head and length-aware decoder, plus the per-sample loss terms.
//!
//! Every component is built regardless of the ablation toggles, from one
//! seeded generator, so two configurations with the same seed start from
//! identical parameters. Toggles only change what the forward pass does.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::datamodel::{Dataset, LengthRule, Moment, RuleMode, Sample};
use crate::encoder::{alignment_loss, saliency_loss, Encoder, EncoderOutput};
use crate::error::{Error, Result};
use crate::eval::Prediction;
use crate::lad::{kmeans_anchors, DecodeOutput, Decoder, RsControl};
use crate::numerics::{NamedTensor, ParamStore, Session, Var};
use crate::objective::{moment_loss, sample_length_ce, sample_mask, MomentWeights, QualityHead};
use crate::qli::{assign_length_roles, generate_rs, LengthClassifier, LengthPerceiver};

#[derive(Clone, Debug)]
pub struct Architecture {
    pub encoder: Encoder,
    pub perceiver: LengthPerceiver,
    pub classifier: LengthClassifier,
    pub quality: QualityHead,
    pub decoder: Decoder,
}

impl Architecture {
    fn build(store: &mut ParamStore, config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, f) = (config.d_model, config.n_heads, config.ffn_dim);
        Self {
            encoder: Encoder::new(store, &mut rng, config),
            perceiver: LengthPerceiver::new(store, &mut rng, d, h, f),
            classifier: LengthClassifier::new(store, &mut rng, config.classifier, d, config.split),
            quality: QualityHead::new(store, &mut rng, d),
            decoder: Decoder::new(store, &mut rng, config.n_decoder_layers, d, h, f),
        }
    }
}

/// Overrides used to check bypass behaviour.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ForwardHooks {
    /// Replaces the classifier's probabilities when suppression is generated.
    pub probabilities: Option<Vec<f64>>,
    /// Replaces the quality-derived suppression mask.
    pub mask: Option<bool>,
}

impl ForwardHooks {
    pub fn masked_off() -> Self {
        Self { mask: Some(false), ..Self::default() }
    }
}

/// Length prediction and suppression state of one sample.
#[derive(Clone, Debug)]
pub struct LengthState {
    /// `1 x k` classifier logits.
    pub logits: Var,
    pub probabilities: Vec<f64>,
    /// `1 x 1` quality score, present with LQM.
    pub quality: Option<Var>,
    pub mask: bool,
    /// Initial group scalars.
    pub group_rs: Vec<f64>,
}

impl LengthState {
    pub fn predicted_category(&self) -> usize {
        self.probabilities
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: EncoderOutput,
    /// `F'`, the clip memory seen by the decoder.
    pub memory: Var,
    pub length: Option<LengthState>,
    pub decode: DecodeOutput,
}

impl Forward {
    /// Final-layer spans ranked by confidence.
    pub fn prediction(&self, id: &str) -> Prediction {
        let last = self.decode.last();
        Prediction::new(id, last.moments().into_iter().zip(last.confidences.iter().copied()).collect())
    }
}

/// Differentiable per-sample terms; the length terms are combined across
/// the batch by the trainer.
#[derive(Clone, Debug)]
pub struct SampleTerms {
    pub moment: Var,
    pub saliency: Var,
    pub alignment: Option<Var>,
    /// Length cross-entropy, with LP&RS.
    pub ce: Option<Var>,
    /// Quality score, with LQM.
    pub quality: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    /// Rule that defines the length categories of the labels.
    pub rule: LengthRule,
    pub anchors: Vec<Moment>,
    /// Length group of each query, indexing `rule.categories()`.
    pub roles: Vec<usize>,
    pub store: ParamStore,
    pub arch: Architecture,
}

impl Model {
    /// Fresh parameters; anchors and roles come from the training moments.
    pub fn new(config: ModelConfig, rule: LengthRule, train: &Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        check_rule(&config, &rule)?;
        let moments = train.all_moments();
        let anchors = kmeans_anchors(&moments, config.n_queries, seed)?;
        let role_rule = match rule.mode {
            RuleMode::Normalized => rule.clone(),
            // seconds do not compare with normalized anchors
            RuleMode::AbsoluteSeconds => {
                LengthRule::equal_proportion(&moments.iter().map(|m| m.length).collect::<Vec<_>>(), config.split)?
            }
        };
        let lengths: Vec<f64> = anchors.iter().map(|a| a.length).collect();
        let roles = assign_length_roles(&lengths, &role_rule)?;
        let mut store = ParamStore::new();
        let arch = Architecture::build(&mut store, &config, seed);
        Ok(Self { config, rule, anchors, roles, store, arch })
    }

    /// Rebuilds a model from saved state.
    pub fn from_parts(
        config: ModelConfig,
        rule: LengthRule,
        anchors: Vec<Moment>,
        roles: Vec<usize>,
        params: &[NamedTensor],
    ) -> Result<Self> {
        config.validate()?;
        check_rule(&config, &rule)?;
        if anchors.len() != config.n_queries || roles.len() != config.n_queries {
            return Err(Error::Checkpoint(format!(
                "{} anchors and {} roles for {} queries",
                anchors.len(),
                roles.len(),
                config.n_queries
            )));
        }
        if roles.iter().any(|&r| r >= config.split) {
            return Err(Error::Checkpoint("query role outside the length split".into()));
        }
        let mut store = ParamStore::new();
        let arch = Architecture::build(&mut store, &config, 0);
        store
            .restore(params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not fit the configuration: {e}")))?;
        Ok(Self { config, rule, anchors, roles, store, arch })
    }

    /// Category index of a sample's label under the model's rule.
    pub fn label_index(&self, sample: &Sample) -> Result<usize> {
        self.rule.index_of(sample.length_label).ok_or_else(|| {
            Error::Labeling(format!(
                "sample {} is labelled {} which is not a category of the {}-way split",
                sample.id,
                sample.length_label,
                self.rule.split()
            ))
        })
    }

    pub fn forward(&self, s: &mut Session, sample: &Sample, hooks: &ForwardHooks) -> Result<Forward> {
        let cfg = &self.config;
        let arch = &self.arch;
        let encoded = arch.encoder.forward(s, &sample.video, &sample.text)?;
        let (token, memory) = arch.perceiver.perceive(s, encoded.fused, encoded.positional)?;

        let length = if cfg.toggles.lp_rs {
            let logits = arch.classifier.logits(s, token)?;
            let probs = arch.classifier.probabilities(s, logits)?;
            let probabilities = s.value(probs).data().to_vec();
            let quality = if cfg.toggles.lqm { Some(arch.quality.score(s, token)?) } else { None };
            let mask = match (hooks.mask, quality) {
                (Some(m), _) => m,
                (None, Some(q)) => sample_mask(s.value(q).item(), cfg.mask_threshold),
                (None, None) => true,
            };
            let source = hooks.probabilities.as_deref().unwrap_or(&probabilities);
            if source.len() != cfg.split {
                return Err(Error::Shape(format!("{} forced probabilities for {} groups", source.len(), cfg.split)));
            }
            let group_rs = generate_rs(source, cfg.tau, cfg.rs_mode)?;
            Some(LengthState { logits, probabilities, quality, mask, group_rs })
        } else {
            None
        };

        let control = length.as_ref().map(|l| RsControl {
            roles: self.roles.clone(),
            groups: cfg.split,
            initial: l.group_rs.clone(),
            mask: l.mask,
            refine: cfg.toggles.lad,
            top_select: cfg.top_select,
            topk_save: cfg.toggles.topk_save.then_some(cfg.topk_save),
            tau: cfg.tau,
            mode: cfg.rs_mode,
        });
        let decode = arch.decoder.decode(s, memory, encoded.positional, &self.anchors, control.as_ref())?;
        Ok(Forward { encoded, memory, length, decode })
    }

    pub fn sample_terms(&self, s: &mut Session, sample: &Sample, fwd: &Forward) -> Result<SampleTerms> {
        let cfg = &self.config;
        let moment = moment_loss(s, &fwd.decode.layers, &sample.moments, MomentWeights::default())?;
        let scores = self.arch.encoder.saliency_scores(s, fwd.memory)?;
        let saliency = saliency_loss(s, scores, &sample.saliency, cfg.saliency_margin)?;
        let alignment = alignment_loss(
            s,
            fwd.encoded.video,
            fwd.encoded.text,
            &sample.positive_clips(),
            cfg.alignment_temperature,
        )?;
        let (ce, quality) = match &fwd.length {
            Some(l) => (Some(sample_length_ce(s, l.logits, self.label_index(sample)?, cfg.classifier)?), l.quality),
            None => (None, None),
        };
        Ok(SampleTerms { moment, saliency, alignment, ce, quality })
    }

    /// `L_mo + l_sal L_sal + l_alig L_alig` of one sample.
    pub fn weighted_sample_loss(&self, s: &mut Session, terms: &SampleTerms) -> Result<Var> {
        let l = &self.config.lambdas;
        let sal = s.scale(terms.saliency, l.sal);
        let mut total = s.add(terms.moment, sal)?;
        if let Some(a) = terms.alignment {
            let a = s.scale(a, l.alig);
            total = s.add(total, a)?;
        }
        Ok(total)
    }

    /// Inference on one sample.
    pub fn predict(&self, sample: &Sample, hooks: &ForwardHooks) -> Result<Inference> {
        let mut s = Session::inference(&self.store);
        let fwd = self.forward(&mut s, sample, hooks)?;
        let last = fwd.decode.last();
        Ok(Inference {
            prediction: fwd.prediction(&sample.id),
            spans: last.span_values.clone(),
            confidences: last.confidences.clone(),
            length_category: fwd.length.as_ref().map(LengthState::predicted_category),
            quality: fwd.length.as_ref().and_then(|l| l.quality).map(|q| s.value(q).item()),
            group_rs: fwd.decode.traces.iter().map(|t| t.group_rs.clone()).collect(),
        })
    }
}

/// Plain values of one inference pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prediction: Prediction,
    /// Final-layer `(center, length)` of every query, in query order.
    pub spans: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    pub length_category: Option<usize>,
    pub quality: Option<f64>,
    /// Group scalars after each decoder layer.
    pub group_rs: Vec<Vec<f64>>,
}

impl Inference {
    /// Exact equality of every span and confidence.
    pub fn max_output_diff(&self, other: &Inference) -> f64 {
        let a = self.spans.iter().flatten().chain(&self.confidences);
        let b = other.spans.iter().flatten().chain(&other.confidences);
        a.zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }
}

fn check_rule(config: &ModelConfig, rule: &LengthRule) -> Result<()> {
    if rule.split() != config.split {
        return Err(Error::Config(format!(
            "length rule has {} categories but the model expects {}",
            rule.split(),
            config.split
        )));
    }
    Ok(())
}

/// Feature widths of a dataset, checked against the configuration.
pub fn check_dims(config: &ModelConfig, data: &Dataset) -> Result<()> {
    if let Some((dv, dt)) = data.feature_dims() {
        if dv != config.d_video || dt != config.d_text {
            return Err(Error::Config(format!(
                "data has {dv}/{dt} video/text features but the model expects {}/{}",
                config.d_video, config.d_text
            )));
        }
    }
    Ok(())
}
