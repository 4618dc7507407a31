//! Decoder layers with anchor-relative span refinement, and the per-layer
//! suppression loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{effective_rs, rs_allocation, rs_update, top_select, topk_save};
use crate::config::RsMode;
use crate::datamodel::Moment;
use crate::error::{Error, Result};
use crate::numerics::nn::{feed_forward, sinusoidal_encoding, Attention, LayerNorm, Linear, Mlp};
use crate::numerics::{inverse_sigmoid, sigmoid, ParamStore, Session, Tensor, Var};
use crate::qli::{apply_rs, generate_rs};

/// Keeps anchors away from 0 and 1 before the logit.
const REF_EPS: f64 = 1e-5;

/// Self-attention among queries, cross-attention to clips, feed-forward;
/// each with a residual connection and post-norm.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            self_attn: Attention::new(store, rng, &format!("{name}.self"), dim, heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross"), dim, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ffn: feed_forward(store, rng, &format!("{name}.ffn"), dim, hidden),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    /// `memory_keys` is the clip memory with positional encodings added.
    pub fn forward(&self, s: &mut Session, content: Var, query_pos: Var, memory: Var, memory_keys: Var) -> Result<Var> {
        let q = s.add(content, query_pos)?;
        let a = self.self_attn.forward(s, q, q, content)?;
        let x = s.add(content, a)?;
        let x = self.norm1.forward(s, x)?;
        let q = s.add(x, query_pos)?;
        let c = self.cross_attn.forward(s, q, memory_keys, memory)?;
        let x = s.add(x, c)?;
        let x = self.norm2.forward(s, x)?;
        let f = self.ffn.forward(s, x)?;
        let x = s.add(x, f)?;
        self.norm3.forward(s, x)
    }
}

/// Suppression settings for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RsControl {
    /// Length group of each query.
    pub roles: Vec<usize>,
    pub groups: usize,
    /// Group scalars entering the first layer.
    pub initial: Vec<f64>,
    /// Sample-level suppression mask.
    pub mask: bool,
    /// Refresh scalars from decoder confidences after each layer.
    pub refine: bool,
    pub top_select: usize,
    pub topk_save: Option<usize>,
    pub tau: f64,
    pub mode: RsMode,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    /// `N_q x 2` rows of `(center, length)`.
    pub spans: Var,
    /// `N_q x 1` foreground logits.
    pub conf_logits: Var,
    pub span_values: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
}

impl LayerOutput {
    /// Predicted spans clamped to valid geometry.
    pub fn moments(&self) -> Vec<Moment> {
        self.span_values.iter().map(|&[c, l]| Moment { center: c, length: l, seconds: None }.clamped()).collect()
    }
}

/// Suppression bookkeeping of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// Per-query scalars applied to the content entering the layer.
    pub applied: Vec<f64>,
    /// Group scalars after this layer's update.
    pub group_rs: Vec<f64>,
    /// Save flags for the next layer.
    pub saved: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct DecodeOutput {
    pub layers: Vec<LayerOutput>,
    pub traces: Vec<LayerTrace>,
}

impl DecodeOutput {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("at least one decoder layer")
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    /// Maps an anchor `(center, length)` to part of its positional embedding.
    pub anchor_mlp: Mlp,
    /// Shared across layers; predicts offsets in logit space.
    pub span_head: Mlp,
    pub conf_head: Linear,
    pub d_model: usize,
}

impl Decoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        n_layers: usize,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        let span_head = Mlp::new(store, rng, "dec.span", &[dim, dim, 2]);
        // start from the anchors
        let last = &span_head.layers[1];
        store.set(last.weight, Tensor::zeros(&[dim, 2])).expect("span head shape");
        Self {
            layers: (0..n_layers)
                .map(|i| DecoderLayer::new(store, rng, &format!("dec.layer{i}"), dim, heads, hidden))
                .collect(),
            anchor_mlp: Mlp::new(store, rng, "dec.anchor", &[2, dim, dim]),
            span_head,
            conf_head: Linear::new(store, rng, "dec.conf", dim, 1),
            d_model: dim,
        }
    }

    /// Positional part of each query: `MLP(anchor) + sine(center)`.
    pub fn query_positions(&self, s: &mut Session, anchors: &[Moment]) -> Result<Var> {
        let raw: Vec<f64> = anchors.iter().flat_map(|a| [a.center, a.length]).collect();
        let a = s.constant(Tensor::matrix(anchors.len(), 2, raw)?);
        let learned = self.anchor_mlp.forward(s, a)?;
        let centers: Vec<f64> = anchors.iter().map(|a| a.center).collect();
        let sine = s.constant(sinusoidal_encoding(&centers, self.d_model));
        s.add(learned, sine)
    }

    /// Runs every layer. With `rs`, suppression is applied to the content
    /// entering each layer and refreshed after it.
    pub fn decode(
        &self,
        s: &mut Session,
        memory: Var,
        memory_pos: Option<Var>,
        anchors: &[Moment],
        rs: Option<&RsControl>,
    ) -> Result<DecodeOutput> {
        let n = anchors.len();
        if let Some(c) = rs {
            if c.roles.len() != n || c.initial.len() != c.groups || c.roles.iter().any(|&r| r >= c.groups) {
                return Err(Error::Shape(format!(
                    "suppression control for {} roles / {} groups does not fit {n} queries",
                    c.roles.len(),
                    c.groups
                )));
            }
        }
        let query_pos = self.query_positions(s, anchors)?;
        let memory_keys = match memory_pos {
            Some(p) => s.add(memory, p)?,
            None => memory,
        };
        let mut content = s.constant(Tensor::zeros(&[n, self.d_model]));
        // every layer refines relative to the anchor itself
        let ref_logits: Vec<f64> =
            anchors.iter().flat_map(|a| [a.center, a.length]).map(|p| inverse_sigmoid(p, REF_EPS)).collect();
        let ref_logits = s.constant(Tensor::matrix(n, 2, ref_logits)?);
        let mut group_rs = rs.map(|c| c.initial.clone()).unwrap_or_default();
        let mut saved = vec![false; n];
        let mut out = DecodeOutput { layers: Vec::with_capacity(self.layers.len()), traces: Vec::new() };

        for layer in &self.layers {
            let mut applied = Vec::new();
            if let Some(c) = rs {
                applied = effective_rs(&group_rs, &c.roles, &saved, c.mask);
                if applied.iter().any(|&x| x != 0.0) {
                    content = apply_rs(s, content, &applied)?;
                }
            }
            content = layer.forward(s, content, query_pos, memory, memory_keys)?;

            let delta = self.span_head.forward(s, content)?;
            let z = s.add(ref_logits, delta)?;
            let spans = s.sigmoid(z);
            let conf_logits = self.conf_head.forward(s, content)?;
            let span_values: Vec<[f64; 2]> = s.value(spans).data().chunks(2).map(|c| [c[0], c[1]]).collect();
            let confidences: Vec<f64> = s.value(conf_logits).data().iter().map(|&z| sigmoid(z)).collect();

            if let Some(c) = rs {
                if c.refine {
                    let refreshed = top_select(&confidences, &c.roles, c.groups, c.top_select);
                    group_rs = rs_update(&group_rs, &generate_rs(&refreshed, c.tau, c.mode)?);
                }
                saved = match c.topk_save {
                    Some(k) => topk_save(&rs_allocation(&group_rs, &c.roles), &confidences, k),
                    None => vec![false; n],
                };
                out.traces.push(LayerTrace { applied, group_rs: group_rs.clone(), saved: saved.clone() });
            }
            out.layers.push(LayerOutput { spans, conf_logits, span_values, confidences });
        }
        Ok(out)
    }
}
