//! Length categories and the rules that bucket moments into them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::Moment;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthCategory {
    Short,
    Middle,
    Long,
    ExtraLong,
}

impl LengthCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            LengthCategory::Short => "short",
            LengthCategory::Middle => "middle",
            LengthCategory::Long => "long",
            LengthCategory::ExtraLong => "extra_long",
        }
    }

    /// Categories of a `k`-way split, shortest first.
    pub fn for_split(k: usize) -> Result<&'static [LengthCategory]> {
        use LengthCategory::*;
        match k {
            2 => Ok(&[Short, Long]),
            3 => Ok(&[Short, Middle, Long]),
            4 => Ok(&[Short, Middle, Long, ExtraLong]),
            _ => Err(Error::Config(format!("length split must be 2, 3 or 4 categories, got {k}"))),
        }
    }
}

impl fmt::Display for LengthCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LengthCategory {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(LengthCategory::Short),
            "middle" => Ok(LengthCategory::Middle),
            "long" => Ok(LengthCategory::Long),
            "extra_long" => Ok(LengthCategory::ExtraLong),
            _ => Err(Error::Config(format!("unknown length category {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMode {
    AbsoluteSeconds,
    Normalized,
}

/// Ascending cut points; bucket `i` is `[b_i, b_{i+1})` except the last,
/// which is closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRule {
    pub mode: RuleMode,
    boundaries: Vec<f64>,
}

impl LengthRule {
    pub fn new(mode: RuleMode, boundaries: Vec<f64>) -> Result<Self> {
        LengthCategory::for_split(boundaries.len().saturating_sub(1))?;
        if boundaries.windows(2).any(|w| !(w[0] < w[1])) || boundaries.iter().any(|b| !b.is_finite()) {
            return Err(Error::Config(format!("length rule boundaries must be strictly increasing: {boundaries:?}")));
        }
        Ok(Self { mode, boundaries })
    }

    /// 0-10 s short, 10-30 s middle, 30-150 s long.
    pub fn qvhighlights() -> Self {
        Self::new(RuleMode::AbsoluteSeconds, vec![0.0, 10.0, 30.0, 150.0]).expect("preset")
    }

    pub fn charades() -> Self {
        Self::new(RuleMode::Normalized, vec![0.0, 0.2, 0.302, 1.0]).expect("preset")
    }

    pub fn tacos() -> Self {
        Self::new(RuleMode::Normalized, vec![0.0, 0.045, 0.1, 1.0]).expect("preset")
    }

    /// Normalized rule used by the synthetic generator.
    pub fn synthetic() -> Self {
        Self::new(RuleMode::Normalized, vec![0.0, 0.2, 0.4, 1.0]).expect("preset")
    }

    /// Normalized `k`-way rule whose interior cut points split `lengths`
    /// into groups of (approximately) equal size.
    pub fn equal_proportion(lengths: &[f64], k: usize) -> Result<Self> {
        LengthCategory::for_split(k)?;
        let mut sorted: Vec<f64> = lengths.iter().copied().filter(|l| l.is_finite()).collect();
        if sorted.len() < k {
            return Err(Error::Config(format!("need at least {k} lengths for a {k}-way split")));
        }
        sorted.sort_by(f64::total_cmp);
        let mut cuts = vec![0.0];
        for i in 1..k {
            let pos = i * sorted.len() / k;
            // midpoint between the neighbours so the cut does not sit on a sample
            let cut = 0.5 * (sorted[pos - 1] + sorted[pos]);
            let prev = *cuts.last().expect("non-empty");
            cuts.push(if cut > prev { cut } else { prev + 1e-9 });
        }
        let top = *cuts.last().expect("non-empty");
        cuts.push(if top < 1.0 { 1.0 } else { top + 1e-9 });
        Self::new(RuleMode::Normalized, cuts)
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn split(&self) -> usize {
        self.boundaries.len() - 1
    }

    pub fn categories(&self) -> &'static [LengthCategory] {
        LengthCategory::for_split(self.split()).expect("validated at construction")
    }

    /// Bucket index of a raw value under the half-open convention.
    pub fn bucket(&self, value: f64) -> Result<usize> {
        let b = &self.boundaries;
        let (lo, hi) = (b[0], b[b.len() - 1]);
        if !(value >= lo && value <= hi) {
            return Err(Error::Labeling(format!("length {value} outside [{lo}, {hi}]")));
        }
        let k = self.split();
        Ok((0..k).find(|&i| value < b[i + 1]).unwrap_or(k - 1))
    }

    pub fn index_of(&self, category: LengthCategory) -> Option<usize> {
        self.categories().iter().position(|&c| c == category)
    }

    /// Category of a moment; absolute rules need its duration in seconds.
    pub fn label(&self, m: &Moment) -> Result<LengthCategory> {
        let value = match self.mode {
            RuleMode::Normalized => m.length,
            RuleMode::AbsoluteSeconds => m
                .seconds
                .ok_or_else(|| Error::Labeling("absolute-seconds rule needs the moment duration in seconds".into()))?,
        };
        Ok(self.categories()[self.bucket(value)?])
    }
}
