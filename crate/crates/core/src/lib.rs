//! Length-aware transformer for temporal sentence grounding.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops read closer to the math in the numeric kernels
#![allow(clippy::needless_range_loop)]

pub mod config;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lad;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pipeline;
pub mod qli;
pub mod train;

#[cfg(test)]
mod testutil;

pub use config::ModelConfig;
pub use error::{Error, Result};
