//! Run configuration and the end-to-end commands: data generation,
//! training, evaluation, ablation and per-query length analysis.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{LossTerms, ModelConfig, Toggles};
use crate::datamodel::{
    generate_synthetic, load_dataset, save_dataset, Dataset, LengthCategory, LengthRule, RuleMode, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::eval::{concentration, histogram_csv, Concentration, MetricsReport, Prediction};
use crate::model::{check_dims, ForwardHooks, Model};
use crate::train::{fit_or_save, load_model, Checkpoint, EpochLog, TrainConfig, Trainer};

/// Named length rules.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum RulePreset {
    /// Normalized cut points for the synthetic generator, any split.
    #[default]
    Synthetic,
    Charades,
    Tacos,
    Qvhighlights,
}

impl RulePreset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "charades" => Ok(Self::Charades),
            "tacos" => Ok(Self::Tacos),
            "qvhighlights" => Ok(Self::Qvhighlights),
            _ => Err(Error::Config(format!("unknown length rule {s:?} (synthetic | charades | tacos | qvhighlights)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::Charades => "charades",
            Self::Tacos => "tacos",
            Self::Qvhighlights => "qvhighlights",
        }
    }

    pub fn rule(self, split: usize) -> Result<LengthRule> {
        let fixed = |r: LengthRule| {
            if r.split() == split {
                Ok(r)
            } else {
                Err(Error::Config(format!("the {} rule is 3-way; split {split} needs the synthetic rule", self.name())))
            }
        };
        match self {
            Self::Synthetic => synthetic_rule(split),
            Self::Charades => fixed(LengthRule::charades()),
            Self::Tacos => fixed(LengthRule::tacos()),
            Self::Qvhighlights => fixed(LengthRule::qvhighlights()),
        }
    }
}

/// Normalized cut points of the synthetic data for a `k`-way split.
pub fn synthetic_rule(k: usize) -> Result<LengthRule> {
    match k {
        2 => LengthRule::new(RuleMode::Normalized, vec![0.0, 0.3, 1.0]),
        3 => Ok(LengthRule::synthetic()),
        4 => LengthRule::new(RuleMode::Normalized, vec![0.0, 0.15, 0.3, 0.5, 1.0]),
        _ => Err(Error::Config(format!("length split must be 2, 3 or 4 categories, got {k}"))),
    }
}

/// Everything a run needs; every field is a named key of the config file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticConfig,
    pub rule: RulePreset,
    /// Held-out samples written by `generate-data`, with clean labels.
    pub eval_samples: usize,
    /// Samples drawn for the per-query length analysis.
    pub analyze_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SyntheticConfig::default(),
            rule: RulePreset::Synthetic,
            eval_samples: 300,
            analyze_samples: 50,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key} (true | false)"))),
    }
}

impl RunConfig {
    /// Sets one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key.trim() {
            "d_model" => m.d_model = parse(key, v)?,
            "n_heads" => m.n_heads = parse(key, v)?,
            "ffn_dim" => m.ffn_dim = parse(key, v)?,
            "n_cross_blocks" => m.n_cross_blocks = parse(key, v)?,
            "n_encoder_layers" => m.n_encoder_layers = parse(key, v)?,
            "n_decoder_layers" => m.n_decoder_layers = parse(key, v)?,
            "n_queries" | "nq" => m.n_queries = parse(key, v)?,
            "use_positional" => m.use_positional = parse_bool(key, v)?,
            "tau" => m.tau = parse(key, v)?,
            "mode" => m.rs_mode = v.parse()?,
            "classifier" => m.classifier = v.parse()?,
            "top_select" => m.top_select = parse(key, v)?,
            "topk_save" => m.topk_save = parse(key, v)?,
            "mask_threshold" => m.mask_threshold = parse(key, v)?,
            "split" => self.set_split(parse(key, v)?)?,
            "alignment_temperature" => m.alignment_temperature = parse(key, v)?,
            "saliency_margin" => m.saliency_margin = parse(key, v)?,
            "lp_rs" => m.toggles.lp_rs = parse_bool(key, v)?,
            "lad" => m.toggles.lad = parse_bool(key, v)?,
            "lqm" => m.toggles.lqm = parse_bool(key, v)?,
            "topk_save_enabled" => m.toggles.topk_save = parse_bool(key, v)?,
            "loss_mean" => m.loss_terms.mean = parse_bool(key, v)?,
            "loss_weight" => m.loss_terms.weight = parse_bool(key, v)?,
            "loss_median" => m.loss_terms.median = parse_bool(key, v)?,
            "lambda_sal" => m.lambdas.sal = parse(key, v)?,
            "lambda_alig" => m.lambdas.alig = parse(key, v)?,
            "lambda_lencl" => m.lambdas.lencl = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "grad_clip" => t.grad_clip = parse(key, v)?,
            "seed" => self.set_seed(parse(key, v)?),
            "rule" => self.rule = RulePreset::parse(v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "analyze_samples" => self.analyze_samples = parse(key, v)?,
            "n_samples" => d.n_samples = parse(key, v)?,
            "clips_min" => d.clips.0 = parse(key, v)?,
            "clips_max" => d.clips.1 = parse(key, v)?,
            "words_min" => d.words.0 = parse(key, v)?,
            "words_max" => d.words.1 = parse(key, v)?,
            "d_video" => {
                d.d_video = parse(key, v)?;
                m.d_video = d.d_video;
            }
            "d_text" => {
                d.d_text = parse(key, v)?;
                m.d_text = d.d_text;
            }
            "signal" => d.signal = parse(key, v)?,
            "noise" => d.noise = parse(key, v)?,
            "label_noise" => d.label_noise = parse(key, v)?,
            "n_topics" => d.n_topics = parse(key, v)?,
            "distractors" => d.distractors = parse(key, v)?,
            "moments_per_sample" => d.moments_per_sample = parse(key, v)?,
            "clip_seconds" => d.clip_seconds = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// One seed drives data generation, initialization and shuffling.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.data.seed = seed;
    }

    /// Changes the number of length categories of both model and data.
    pub fn set_split(&mut self, k: usize) -> Result<()> {
        let rule = synthetic_rule(k)?;
        self.model.split = k;
        let b = rule.boundaries();
        self.data.category_priors = vec![1.0 / k as f64; k];
        self.data.category_lengths = (0..k).map(|i| (b[i].max(0.05), b[i + 1].min(0.8))).collect();
        self.data.rule = rule;
        Ok(())
    }

    /// Applies ablation toggles; without LQM only the mean length term is
    /// available.
    pub fn with_toggles(&self, toggles: Toggles) -> Self {
        let mut r = self.clone();
        r.model.toggles = toggles;
        if !toggles.lqm {
            r.model.loss_terms = LossTerms { mean: true, weight: false, median: false };
        }
        r
    }

    /// Reads `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: origin.to_path_buf(),
                    line: i + 1,
                    message: "expected key = value".into(),
                });
            };
            self.set(k, v).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut r = Self::default();
        r.apply_text(&text, path)?;
        Ok(r)
    }

    /// Every key with its current value, readable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let d = &self.data;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("split", m.split.to_string());
        kv("rule", self.rule.name().into());
        kv("d_video", m.d_video.to_string());
        kv("d_text", m.d_text.to_string());
        kv("d_model", m.d_model.to_string());
        kv("n_heads", m.n_heads.to_string());
        kv("ffn_dim", m.ffn_dim.to_string());
        kv("n_cross_blocks", m.n_cross_blocks.to_string());
        kv("n_encoder_layers", m.n_encoder_layers.to_string());
        kv("n_decoder_layers", m.n_decoder_layers.to_string());
        kv("n_queries", m.n_queries.to_string());
        kv("use_positional", m.use_positional.to_string());
        kv("tau", m.tau.to_string());
        kv("mode", m.rs_mode.to_string());
        kv("classifier", m.classifier.to_string());
        kv("top_select", m.top_select.to_string());
        kv("topk_save", m.topk_save.to_string());
        kv("mask_threshold", m.mask_threshold.to_string());
        kv("alignment_temperature", m.alignment_temperature.to_string());
        kv("saliency_margin", m.saliency_margin.to_string());
        kv("lp_rs", m.toggles.lp_rs.to_string());
        kv("lad", m.toggles.lad.to_string());
        kv("lqm", m.toggles.lqm.to_string());
        kv("topk_save_enabled", m.toggles.topk_save.to_string());
        kv("loss_mean", m.loss_terms.mean.to_string());
        kv("loss_weight", m.loss_terms.weight.to_string());
        kv("loss_median", m.loss_terms.median.to_string());
        kv("lambda_sal", m.lambdas.sal.to_string());
        kv("lambda_alig", m.lambdas.alig.to_string());
        kv("lambda_lencl", m.lambdas.lencl.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("grad_clip", t.grad_clip.to_string());
        kv("seed", t.seed.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("analyze_samples", self.analyze_samples.to_string());
        kv("n_samples", d.n_samples.to_string());
        kv("clips_min", d.clips.0.to_string());
        kv("clips_max", d.clips.1.to_string());
        kv("words_min", d.words.0.to_string());
        kv("words_max", d.words.1.to_string());
        kv("signal", d.signal.to_string());
        kv("noise", d.noise.to_string());
        kv("label_noise", d.label_noise.to_string());
        kv("n_topics", d.n_topics.to_string());
        kv("distractors", d.distractors.to_string());
        kv("moments_per_sample", d.moments_per_sample.to_string());
        kv("clip_seconds", d.clip_seconds.to_string());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.rule.split() != self.model.split {
            return Err(Error::Config("data and model disagree on the length split".into()));
        }
        self.rule.rule(self.model.split).map(|_| ())
    }

    pub fn length_rule(&self) -> Result<LengthRule> {
        self.rule.rule(self.model.split)
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Usage(format!("cannot encode output: {e}")))
}

/// Training samples with the configured label noise, then held-out samples
/// from the same generator relabelled from their moments.
pub fn generate_split(run: &RunConfig) -> Result<(Dataset, Dataset)> {
    let spec = SyntheticConfig { n_samples: run.data.n_samples + run.eval_samples, ..run.data.clone() };
    let all = generate_synthetic(&spec)?;
    let (train, mut eval) = all.split_tail(run.eval_samples);
    for s in &mut eval.samples {
        s.length_label = spec.rule.label(s.primary_moment())?;
    }
    Ok((train, eval))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub train: PathBuf,
    pub eval: PathBuf,
    pub train_counts: Vec<(LengthCategory, usize)>,
    pub eval_counts: Vec<(LengthCategory, usize)>,
}

/// Writes `train.jsonl`, `eval.jsonl` and the config echo.
pub fn cmd_generate_data(run: &RunConfig, out_dir: &Path) -> Result<GenerateSummary> {
    run.data.validate()?;
    ensure_dir(out_dir)?;
    let (train, eval) = generate_split(run)?;
    let train_path = out_dir.join("train.jsonl");
    let eval_path = out_dir.join("eval.jsonl");
    save_dataset(&train, &train_path)?;
    save_dataset(&eval, &eval_path)?;
    write(&out_dir.join("run_config.txt"), run.to_text())?;
    Ok(GenerateSummary {
        train_counts: train.category_counts(&run.data.rule),
        eval_counts: eval.category_counts(&run.data.rule),
        train: train_path,
        eval: eval_path,
    })
}

/// Builds and trains a model in memory.
pub fn train_model(run: &RunConfig, data: &Dataset, on_epoch: impl FnMut(&EpochLog)) -> Result<Trainer> {
    run.model.validate()?;
    check_dims(&run.model, data)?;
    let model = Model::new(run.model.clone(), run.length_rule()?, data, run.train.seed)?;
    let mut trainer = Trainer::new(model, run.train.clone())?;
    trainer.fit(data, on_epoch)?;
    Ok(trainer)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub steps: u64,
    pub final_loss: f64,
}

/// Trains from scratch, or continues `resume` up to `run.train.epochs`.
/// Writes `checkpoint.json`, `train_log.csv` and the config echo.
pub fn cmd_train(run: &RunConfig, data_path: &Path, out_dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let data = load_dataset(data_path)?;
    ensure_dir(out_dir)?;
    let mut trainer = match resume {
        Some(path) => {
            let mut t = Trainer::from_checkpoint(Checkpoint::load(path)?)?;
            t.train.epochs = run.train.epochs;
            t
        }
        None => {
            run.model.validate()?;
            check_dims(&run.model, &data)?;
            let model = Model::new(run.model.clone(), run.length_rule()?, &data, run.train.seed)?;
            Trainer::new(model, run.train.clone())?
        }
    };
    check_dims(&trainer.model.config, &data)?;
    let checkpoint = out_dir.join("checkpoint.json");
    let log_path = out_dir.join("train_log.csv");
    let mut log = EpochLog::csv_header() + "\n";
    for e in &trainer.history {
        log.push_str(&(e.csv_row() + "\n"));
    }
    let result = fit_or_save(&mut trainer, &data, &checkpoint, |e| {
        info!("{}", e.csv_row());
        log.push_str(&(e.csv_row() + "\n"));
    });
    write(&log_path, &log)?;
    write(&out_dir.join("run_config.txt"), run.to_text())?;
    result?;
    trainer.checkpoint().save(&checkpoint)?;
    Ok(TrainSummary {
        checkpoint,
        epochs: trainer.epoch,
        steps: trainer.step(),
        final_loss: trainer.history.last().map_or(f64::NAN, |e| e.loss.total),
    })
}

/// `n` sample indices drawn with `seed`, ascending; `n` is clamped to the
/// dataset size.
pub fn choose_samples(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, len, n.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Predicted normalized length of every query on the chosen samples:
/// `lengths[q][i]` belongs to sample `indices[i]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryLengths {
    pub indices: Vec<usize>,
    pub lengths: Vec<Vec<f64>>,
}

pub fn query_lengths(model: &Model, data: &Dataset, n: usize, seed: u64) -> Result<QueryLengths> {
    let indices = choose_samples(data.len(), n, seed);
    let mut lengths = vec![Vec::with_capacity(indices.len()); model.config.n_queries];
    for &i in &indices {
        let out = model.predict(&data.samples[i], &ForwardHooks::default())?;
        for (q, span) in out.spans.iter().enumerate() {
            lengths[q].push(span[1]);
        }
    }
    Ok(QueryLengths { indices, lengths })
}

/// Length spread of query `q` over `n` seeded samples.
pub fn query_concentration(model: &Model, data: &Dataset, q: usize, n: usize, seed: u64) -> Result<Concentration> {
    if q >= model.config.n_queries {
        return Err(Error::Usage(format!("query {q} out of {}", model.config.n_queries)));
    }
    Ok(concentration(&query_lengths(model, data, n, seed)?.lengths[q]))
}

/// Metrics over a dataset, plus per-query concentration on `n_analyze`
/// seeded samples.
pub fn evaluate(model: &Model, data: &Dataset, n_analyze: usize, seed: u64) -> Result<MetricsReport> {
    check_dims(&model.config, data)?;
    let mut preds: Vec<Prediction> = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    for s in &data.samples {
        let out = model.predict(s, &ForwardHooks::default())?;
        if let Some(c) = out.length_category {
            correct += (c == model.label_index(s)?) as usize;
        }
        preds.push(out.prediction);
    }
    let gts: Vec<_> = data.samples.iter().map(|s| s.moments.clone()).collect();
    let mut report = MetricsReport::compute(&preds, &gts);
    if model.config.toggles.lp_rs && !data.is_empty() {
        report.length_accuracy = Some(correct as f64 / data.len() as f64);
    }
    let conc: Vec<Concentration> =
        query_lengths(model, data, n_analyze, seed)?.lengths.iter().map(|l| concentration(l)).collect();
    report.query_std = conc.iter().map(|c| c.std).collect();
    report.query_histograms = conc.into_iter().map(|c| c.histogram).collect();
    Ok(report)
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    config: &'a ModelConfig,
    rule: &'a LengthRule,
    analysis_seed: u64,
    metrics: &'a MetricsReport,
}

/// Writes `metrics.json` (with the model configuration) and `metrics.csv`.
pub fn cmd_eval(
    checkpoint: &Path,
    data_path: &Path,
    out_dir: &Path,
    n_analyze: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let model = load_model(checkpoint)?;
    let data = load_dataset(data_path)?;
    ensure_dir(out_dir)?;
    let report = evaluate(&model, &data, n_analyze, seed)?;
    let out = EvalOutput { config: &model.config, rule: &model.rule, analysis_seed: seed, metrics: &report };
    write(&out_dir.join("metrics.json"), to_json(&out)?)?;
    write(&out_dir.join("metrics.csv"), report.to_csv())?;
    Ok(report)
}

/// One row of the component ablation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub row: String,
    pub toggles: Toggles,
    pub final_loss: f64,
    pub metrics: MetricsReport,
}

pub const ABLATION_HEADER: &str =
    "row,lp_rs,lad,lqm,topk_save,final_loss,r1_0.3,r1_0.5,r1_0.7,map_0.5,map_0.75,avg_map,miou,length_accuracy,mean_query_std";

impl AblationRow {
    pub fn csv_row(&self) -> String {
        let t = &self.toggles;
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.row,
            t.lp_rs,
            t.lad,
            t.lqm,
            t.topk_save,
            self.final_loss,
            m.r1_03,
            m.r1_05,
            m.r1_07,
            m.map_50,
            m.map_75,
            m.avg_map,
            m.miou,
            m.length_accuracy.map_or(String::new(), |a| a.to_string()),
            m.mean_query_std()
        )
    }
}

/// Trains and evaluates the named rows (`a` to `f`) on shared data and seed.
pub fn run_ablation(run: &RunConfig, train: &Dataset, eval: &Dataset, rows: &[&str]) -> Result<Vec<AblationRow>> {
    let table = Toggles::ablation_rows();
    rows.iter()
        .map(|&name| {
            let (_, toggles) = *table
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Usage(format!("unknown ablation row {name:?} (a to f)")))?;
            let r = run.with_toggles(toggles);
            let trainer = train_model(&r, train, |_| {})?;
            let metrics = evaluate(&trainer.model, eval, r.analyze_samples, r.train.seed)?;
            info!("row {name}: R1@0.5 {:.4}", metrics.r1_05);
            Ok(AblationRow {
                row: name.into(),
                toggles,
                final_loss: trainer.history.last().map_or(f64::NAN, |e| e.loss.total),
                metrics,
            })
        })
        .collect()
}

/// Writes `ablation.csv` with rows `a` to `f`.
pub fn cmd_ablate(run: &RunConfig, train_path: &Path, eval_path: &Path, out_dir: &Path) -> Result<Vec<AblationRow>> {
    let train = load_dataset(train_path)?;
    let eval = load_dataset(eval_path)?;
    ensure_dir(out_dir)?;
    let rows = run_ablation(run, &train, &eval, &["a", "b", "c", "d", "e", "f"])?;
    let mut csv = String::from(ABLATION_HEADER) + "\n";
    for r in &rows {
        csv.push_str(&(r.csv_row() + "\n"));
    }
    write(&out_dir.join("ablation.csv"), csv)?;
    write(&out_dir.join("run_config.txt"), run.to_text())?;
    Ok(rows)
}

/// Writes `concentration.csv` (one row per query), `histograms.csv` and
/// `scatter.csv` (one row per sample and query).
pub fn cmd_analyze(
    checkpoint: &Path,
    data_path: &Path,
    out_dir: &Path,
    n: usize,
    seed: u64,
) -> Result<Vec<Concentration>> {
    let model = load_model(checkpoint)?;
    let data = load_dataset(data_path)?;
    check_dims(&model.config, &data)?;
    ensure_dir(out_dir)?;
    let ql = query_lengths(&model, &data, n, seed)?;
    let conc: Vec<Concentration> = ql.lengths.iter().map(|l| concentration(l)).collect();
    let cats = model.rule.categories();

    let mut summary = String::from("query,role,anchor_center,anchor_length,mean_length,std\n");
    let mut hist = String::from("query,bin_lo,bin_hi,count\n");
    for (q, c) in conc.iter().enumerate() {
        let mean = if c.lengths.is_empty() { 0.0 } else { c.lengths.iter().sum::<f64>() / c.lengths.len() as f64 };
        let a = &model.anchors[q];
        let _ = writeln!(summary, "{q},{},{},{},{mean},{}", cats[model.roles[q]], a.center, a.length, c.std);
        for line in histogram_csv(&c.histogram).lines().skip(1) {
            let _ = writeln!(hist, "{q},{line}");
        }
    }
    let mut scatter = String::from("sample_index,sample_id,query,length\n");
    for (i, &idx) in ql.indices.iter().enumerate() {
        for (q, l) in ql.lengths.iter().enumerate() {
            let _ = writeln!(scatter, "{idx},{},{q},{}", data.samples[idx].id, l[i]);
        }
    }
    write(&out_dir.join("concentration.csv"), summary)?;
    write(&out_dir.join("histograms.csv"), hist)?;
    write(&out_dir.join("scatter.csv"), scatter)?;
    let echo = serde_json::json!({ "config": model.config, "rule": model.rule, "samples": n, "seed": seed });
    write(&out_dir.join("analysis_config.json"), to_json(&echo)?)?;
    Ok(conc)
}
