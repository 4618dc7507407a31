//! Query-length interaction: a length token pools length cues from the
//! fusion embedding, a classifier turns it into per-category probabilities,
//! and those become residual-suppression scalars for the decoder queries.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ClassifierKind, RsMode};
use crate::datamodel::LengthRule;
use crate::error::{Error, Result};
use crate::numerics::nn::{EncoderLayer, Mlp};
use crate::numerics::{ParamId, ParamStore, Session, Tensor, Var};

/// Learned length token plus the self-attention layer that reads it out.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LengthPerceiver {
    /// `1 x D`, zero-initialized.
    pub token: ParamId,
    pub layer: EncoderLayer,
}

impl LengthPerceiver {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, heads: usize, hidden: usize) -> Self {
        Self {
            token: store.zeros("qli.token", &[1, dim]),
            layer: EncoderLayer::new(store, rng, "qli.perceiver", dim, heads, hidden),
        }
    }

    /// Prepends the token to the clips, attends, and splits the result back
    /// into `(LT', F')`. The token receives a zero positional encoding.
    pub fn perceive(&self, s: &mut Session, fused: Var, positional: Option<Var>) -> Result<(Var, Var)> {
        let token = s.param(self.token);
        let (l, d) = (s.value(fused).rows(), s.value(fused).cols());
        let seq = s.concat_rows(&[token, fused])?;
        let pos = match positional {
            Some(p) => {
                let zero = s.constant(Tensor::zeros(&[1, d]));
                Some(s.concat_rows(&[zero, p])?)
            }
            None => None,
        };
        let out = self.layer.forward(s, seq, pos)?;
        let lt = s.slice_rows(out, 0, 1)?;
        let f = s.slice_rows(out, 1, l + 1)?;
        Ok((lt, f))
    }
}

/// Length classifier over the pooled token.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LengthClassifier {
    pub kind: ClassifierKind,
    /// One head per category (binary) or a single `k`-way head (softmax).
    pub heads: Vec<Mlp>,
    pub categories: usize,
}

impl LengthClassifier {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        kind: ClassifierKind,
        dim: usize,
        categories: usize,
    ) -> Self {
        let heads = match kind {
            ClassifierKind::Binary => {
                (0..categories).map(|i| Mlp::new(store, rng, &format!("qli.cls{i}"), &[dim, dim, 1])).collect()
            }
            ClassifierKind::Softmax => vec![Mlp::new(store, rng, "qli.cls", &[dim, dim, categories])],
        };
        Self { kind, heads, categories }
    }

    /// `1 x k` logits in category order (shortest first).
    pub fn logits(&self, s: &mut Session, token: Var) -> Result<Var> {
        let parts = self.heads.iter().map(|h| h.forward(s, token)).collect::<Result<Vec<_>>>()?;
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            s.concat_cols(&parts)
        }
    }

    pub fn probabilities(&self, s: &mut Session, logits: Var) -> Result<Var> {
        match self.kind {
            ClassifierKind::Binary => Ok(s.sigmoid(logits)),
            ClassifierKind::Softmax => s.softmax_rows(logits),
        }
    }
}

pub fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold tau must lie in (0, 1), got {tau}")))
    }
}

/// Per-group suppression scalars from length probabilities.
pub fn generate_rs(probs: &[f64], tau: f64, mode: RsMode) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(probs
        .iter()
        .map(|&p| match mode {
            RsMode::ProseConsistent => (p - tau).min(0.0),
            RsMode::Literal => tau - p,
        })
        .collect())
}

/// `E' = (1 + s) E` row by row; `s` carries no gradient.
pub fn apply_rs(s: &mut Session, content: Var, scalars: &[f64]) -> Result<Var> {
    if let Some(bad) = scalars.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("suppression scalar {bad} is not finite")));
    }
    let factors: Vec<f64> = scalars.iter().map(|x| 1.0 + x).collect();
    s.scale_rows(content, &factors)
}

/// Length group of each query, from its anchor length under a normalized
/// rule. Groups are kept non-empty by shifting boundary anchors from the
/// nearest group that can spare one.
pub fn assign_length_roles(anchor_lengths: &[f64], rule: &LengthRule) -> Result<Vec<usize>> {
    let k = rule.split();
    let n = anchor_lengths.len();
    if n < k {
        return Err(Error::Config(format!("{n} queries cannot cover {k} length groups")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| anchor_lengths[a].total_cmp(&anchor_lengths[b]).then(a.cmp(&b)));
    let mut counts = vec![0usize; k];
    for &i in &order {
        // anchors outside the rule's range fall into the end buckets
        let b = rule.boundaries();
        let v = anchor_lengths[i].clamp(b[0], b[k]);
        counts[rule.bucket(v)?] += 1;
    }
    let mut rebalanced = false;
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..k)
            .filter(|&g| counts[g] > 1)
            .min_by_key(|&g| (g.abs_diff(empty), g))
            .expect("n >= k leaves a group with spare anchors");
        counts[donor] -= 1;
        counts[empty] += 1;
        rebalanced = true;
    }
    if rebalanced {
        info!("length roles rebalanced to group sizes {counts:?}");
    }
    let mut roles = vec![0; n];
    let mut it = order.into_iter();
    for (g, &c) in counts.iter().enumerate() {
        for i in it.by_ref().take(c) {
            roles[i] = g;
        }
    }
    Ok(roles)
}
