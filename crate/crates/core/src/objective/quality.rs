//! Quality scores of the length token and the suppression masks they gate.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::nn::Mlp;
use crate::numerics::{ParamStore, Session, Var};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QualityHead {
    pub mlp: Mlp,
}

impl QualityHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize) -> Self {
        Self { mlp: Mlp::new(store, rng, "quality", &[dim, dim, 1]) }
    }

    /// `1 x 1` logit of the quality score.
    pub fn logit(&self, s: &mut Session, token: Var) -> Result<Var> {
        self.mlp.forward(s, token)
    }

    /// `Qs` in `(0, 1)`.
    pub fn score(&self, s: &mut Session, token: Var) -> Result<Var> {
        let z = self.logit(s, token)?;
        Ok(s.sigmoid(z))
    }
}

/// Whether a sample keeps its suppression.
pub fn sample_mask(qs: f64, threshold: f64) -> bool {
    qs >= threshold
}

/// Per-sample masks broadcast over `n_queries`: ones for reliable samples,
/// zeros otherwise.
pub fn build_masks(qs: &[f64], threshold: f64, n_queries: usize) -> Vec<Vec<f64>> {
    qs.iter().map(|&q| vec![if sample_mask(q, threshold) { 1.0 } else { 0.0 }; n_queries]).collect()
}
