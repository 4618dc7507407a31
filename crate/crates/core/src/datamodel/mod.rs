//! Samples, moments, length labels, synthetic data and dataset files.

mod io;
mod length;
mod synthetic;

pub use io::{load_dataset, save_dataset};
pub use length::{LengthCategory, LengthRule, RuleMode};
pub use synthetic::{generate_synthetic, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Geometry tolerance for span endpoints.
const SPAN_EPS: f64 = 1e-9;

/// A temporal span `(center, length)` normalized to the video duration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub center: f64,
    pub length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

impl Moment {
    pub fn new(center: f64, length: f64) -> Result<Self> {
        let m = Self { center, length, seconds: None };
        m.validate()?;
        Ok(m)
    }

    pub fn from_bounds(start: f64, end: f64) -> Result<Self> {
        Self::new(0.5 * (start + end), end - start)
    }

    pub fn with_seconds(mut self, seconds: f64) -> Self {
        self.seconds = Some(seconds);
        self
    }

    pub fn start(&self) -> f64 {
        self.center - 0.5 * self.length
    }

    pub fn end(&self) -> f64 {
        self.center + 0.5 * self.length
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.center.is_finite()
            && self.length.is_finite()
            && self.length > 0.0
            && self.length <= 1.0 + SPAN_EPS
            && self.start() >= -SPAN_EPS
            && self.end() <= 1.0 + SPAN_EPS
            && self.seconds.is_none_or(|s| s.is_finite() && s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidMoment(format!(
                "center {}, length {}; need length in (0, 1] inside [0, 1]",
                self.center, self.length
            )))
        }
    }

    /// Clips the span to `[0, 1]`; a span with no extent left keeps a
    /// minimal length around its clamped centre.
    pub fn clamped(&self) -> Self {
        let s = self.start().clamp(0.0, 1.0);
        let e = self.end().clamp(0.0, 1.0);
        if e - s > 0.0 {
            Self { center: 0.5 * (s + e), length: e - s, seconds: self.seconds }
        } else {
            let c = self.center.clamp(1e-6, 1.0 - 1e-6);
            Self { center: c, length: 2e-6, seconds: self.seconds }
        }
    }
}

/// One video-text pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `L x d_v` clip features.
    pub video: Tensor,
    /// `N x d_t` word features.
    pub text: Tensor,
    pub moments: Vec<Moment>,
    /// Per-clip targets in `[0, 1]`.
    pub saliency: Vec<f64>,
    pub length_label: LengthCategory,
}

impl Sample {
    pub fn num_clips(&self) -> usize {
        self.video.rows()
    }

    pub fn primary_moment(&self) -> &Moment {
        &self.moments[0]
    }

    /// Indices of clips whose centre lies inside any ground-truth span.
    pub fn positive_clips(&self) -> Vec<usize> {
        let l = self.num_clips();
        (0..l)
            .filter(|&j| {
                let c = (j as f64 + 0.5) / l as f64;
                self.moments.iter().any(|m| c >= m.start() && c <= m.end())
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation { id: self.id.clone(), message };
        if self.video.rows() == 0 || self.video.cols() == 0 {
            return Err(fail("video has no clips".into()));
        }
        if self.text.rows() == 0 || self.text.cols() == 0 {
            return Err(fail("text has no words".into()));
        }
        if !self.video.all_finite() || !self.text.all_finite() {
            return Err(fail("features contain non-finite values".into()));
        }
        if self.moments.is_empty() {
            return Err(fail("no ground-truth moments".into()));
        }
        for (i, m) in self.moments.iter().enumerate() {
            m.validate().map_err(|e| fail(format!("moment {i}: {e}")))?;
        }
        if self.saliency.len() != self.video.rows() {
            return Err(fail(format!("saliency has {} scores for {} clips", self.saliency.len(), self.video.rows())));
        }
        if self.saliency.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(fail("saliency scores must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Counts per category, in the order of `rule.categories()`.
    pub fn category_counts(&self, rule: &LengthRule) -> Vec<(LengthCategory, usize)> {
        rule.categories().iter().map(|&c| (c, self.samples.iter().filter(|s| s.length_label == c).count())).collect()
    }

    pub fn all_moments(&self) -> Vec<Moment> {
        self.samples.iter().flat_map(|s| s.moments.iter().copied()).collect()
    }

    /// Feature widths `(d_v, d_t)` of the first sample.
    pub fn feature_dims(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.video.cols(), s.text.cols()))
    }

    /// Splits off the trailing `n` samples.
    pub fn split_tail(mut self, n: usize) -> (Dataset, Dataset) {
        let at = self.samples.len().saturating_sub(n);
        let tail = self.samples.split_off(at);
        (self, Dataset::new(tail))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moment_geometry() {
        let m = Moment::from_bounds(0.2, 0.6).unwrap();
        assert!((m.center - 0.4).abs() < 1e-15 && (m.length - 0.4).abs() < 1e-15);
        assert!(Moment::new(0.5, 0.0).is_err());
        assert!(Moment::new(0.1, 0.5).is_err());
        assert!(Moment::new(0.5, 1.0).is_ok());
    }

    #[test]
    fn clamping_restores_validity() {
        let raw = Moment { center: 0.05, length: 0.3, seconds: None };
        let c = raw.clamped();
        assert!(c.validate().is_ok());
        assert!((c.start() - 0.0).abs() < 1e-15 && (c.end() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn positive_clips_follow_moment() {
        let s = Sample {
            id: "x".into(),
            video: Tensor::zeros(&[10, 2]),
            text: Tensor::zeros(&[3, 2]),
            moments: vec![Moment::from_bounds(0.2, 0.5).unwrap()],
            saliency: vec![0.0; 10],
            length_label: LengthCategory::Middle,
        };
        assert_eq!(s.positive_clips(), vec![2, 3, 4]);
    }
}
