//! Model hyperparameters and ablation switches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How length probabilities become residual-suppression scalars.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RsMode {
    /// `min(0, P - tau)`: matched lengths untouched, mismatched shrunk.
    #[default]
    ProseConsistent,
    /// `tau - P`, applied as written.
    Literal,
}

impl FromStr for RsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prose-consistent" | "prose" => Ok(RsMode::ProseConsistent),
            "literal" => Ok(RsMode::Literal),
            _ => Err(Error::Config(format!("unknown suppression mode {s:?} (prose-consistent | literal)"))),
        }
    }
}

impl fmt::Display for RsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RsMode::ProseConsistent => "prose-consistent",
            RsMode::Literal => "literal",
        })
    }
}

/// Length classifier head layout.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    /// One sigmoid head per category.
    #[default]
    Binary,
    /// A single softmax head over all categories.
    Softmax,
}

impl FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(ClassifierKind::Binary),
            "softmax" => Ok(ClassifierKind::Softmax),
            _ => Err(Error::Config(format!("unknown classifier {s:?} (binary | softmax)"))),
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Binary => "binary",
            ClassifierKind::Softmax => "softmax",
        })
    }
}

/// Component switches mirroring the main ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Length prediction and residual suppression.
    pub lp_rs: bool,
    /// Decoder-side refinement of the suppression (top-select + update).
    pub lad: bool,
    /// Low-quality residual masking.
    pub lqm: bool,
    /// Exempt the most confident suppressed queries.
    pub topk_save: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles { lp_rs: true, lad: true, lqm: true, topk_save: true };
    pub const NONE: Toggles = Toggles { lp_rs: false, lad: false, lqm: false, topk_save: false };

    /// Rows (a)-(f) of the component ablation.
    pub fn ablation_rows() -> [(&'static str, Toggles); 6] {
        let t = |lp_rs, lad, lqm, topk_save| Toggles { lp_rs, lad, lqm, topk_save };
        [
            ("a", t(false, false, false, false)),
            ("b", t(true, false, false, false)),
            ("c", t(true, true, false, false)),
            ("d", t(true, true, true, false)),
            ("e", t(true, true, false, true)),
            ("f", t(true, true, true, true)),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lp_rs {
            for (on, name) in [(self.lad, "LAD"), (self.lqm, "LQM"), (self.topk_save, "TopK-Save")] {
                if on {
                    return Err(Error::Config(format!(
                        "{name} needs length prediction and residual suppression (lp_rs) enabled"
                    )));
                }
            }
        }
        Ok(())
    }
}

impl Default for Toggles {
    fn default() -> Self {
        Self::ALL
    }
}

/// Which terms make up the length-classification loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub mean: bool,
    pub weight: bool,
    pub median: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self { mean: true, weight: true, median: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub sal: f64,
    pub alig: f64,
    pub lencl: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self { sal: 1.0, alig: 0.3, lencl: 1.0 }
    }
}

impl Lambdas {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [(self.sal, "lambda_sal"), (self.alig, "lambda_alig"), (self.lencl, "lambda_lencl")] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_video: usize,
    pub d_text: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_cross_blocks: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub n_queries: usize,
    pub use_positional: bool,
    pub tau: f64,
    pub rs_mode: RsMode,
    pub classifier: ClassifierKind,
    /// Top-Select count S.
    pub top_select: usize,
    /// TopK-Save count K.
    pub topk_save: usize,
    pub mask_threshold: f64,
    /// Number of length categories (2, 3 or 4).
    pub split: usize,
    pub alignment_temperature: f64,
    pub saliency_margin: f64,
    pub toggles: Toggles,
    pub loss_terms: LossTerms,
    pub lambdas: Lambdas,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_video: 16,
            d_text: 16,
            d_model: 256,
            n_heads: 1,
            ffn_dim: 512,
            n_cross_blocks: 2,
            n_encoder_layers: 2,
            n_decoder_layers: 3,
            n_queries: 20,
            use_positional: true,
            tau: 0.5,
            rs_mode: RsMode::ProseConsistent,
            classifier: ClassifierKind::Binary,
            top_select: 4,
            topk_save: 3,
            mask_threshold: 0.5,
            split: 3,
            alignment_temperature: 1.0,
            saliency_margin: 0.2,
            toggles: Toggles::ALL,
            loss_terms: LossTerms::default(),
            lambdas: Lambdas::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_video == 0 || self.d_text == 0 || self.d_model == 0 || self.ffn_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} must be divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_decoder_layers == 0 {
            return bad("need at least one decoder layer".into());
        }
        if !(2..=4).contains(&self.split) {
            return bad(format!("split must be 2, 3 or 4, got {}", self.split));
        }
        if self.n_queries < self.split {
            return bad(format!("{} queries cannot cover {} length groups", self.n_queries, self.split));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.top_select == 0 {
            return bad("top_select must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mask_threshold) {
            return bad("mask_threshold must lie in [0, 1]".into());
        }
        if !(self.alignment_temperature > 0.0) || !(self.saliency_margin >= 0.0) {
            return bad("alignment temperature must be positive and saliency margin non-negative".into());
        }
        self.toggles.validate()?;
        self.lambdas.validate()?;
        if self.toggles.lp_rs && !(self.loss_terms.mean || self.loss_terms.weight || self.loss_terms.median) {
            return bad("length classification needs at least one loss term".into());
        }
        if !self.toggles.lqm && (self.loss_terms.weight || self.loss_terms.median) && self.toggles.lp_rs {
            // quality scores only exist with LQM; fall back silently is not allowed
            return bad("weight and median loss terms need LQM (quality scores)".into());
        }
        Ok(())
    }

    /// Loss terms actually in effect: without LQM only the mean term exists.
    pub fn effective_loss_terms(&self) -> LossTerms {
        if self.toggles.lqm {
            self.loss_terms
        } else {
            LossTerms { mean: true, weight: false, median: false }
        }
    }
}
