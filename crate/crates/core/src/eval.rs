//! Grounding metrics and per-query length concentration.
//!
//! All metrics are fractions in `[0, 1]`; nothing here formats percentages.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::Moment;
use crate::error::{Error, Result};

pub const R1_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// `0.5, 0.55, ..., 0.95`.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Ranked spans for one sample, most confident first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub ranked: Vec<(Moment, f64)>,
}

impl Prediction {
    /// Sorts by confidence, descending; equal scores keep their order.
    pub fn new(id: impl Into<String>, mut ranked: Vec<(Moment, f64)>) -> Self {
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        Self { id: id.into(), ranked }
    }

    pub fn top(&self) -> Option<&Moment> {
        self.ranked.first().map(|(m, _)| m)
    }
}

pub fn temporal_iou(a: &Moment, b: &Moment) -> f64 {
    let inter = (a.end().min(b.end()) - a.start().max(b.start())).max(0.0);
    let union = a.length + b.length - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn best_iou(m: &Moment, gts: &[Moment]) -> f64 {
    gts.iter().map(|g| temporal_iou(m, g)).fold(0.0, f64::max)
}

fn top1_ious(preds: &[Prediction], gts: &[Vec<Moment>]) -> Vec<f64> {
    gts.iter()
        .enumerate()
        .map(|(i, g)| preds.get(i).and_then(Prediction::top).map_or(0.0, |m| best_iou(m, g)))
        .collect()
}

/// Fraction of samples whose top prediction overlaps some ground truth by
/// at least `theta`. `preds[i]` belongs to `gts[i]`; missing predictions
/// are misses.
pub fn recall_at_1(preds: &[Prediction], gts: &[Vec<Moment>], theta: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    top1_ious(preds, gts).iter().filter(|&&iou| iou >= theta).count() as f64 / gts.len() as f64
}

pub fn mean_iou(preds: &[Prediction], gts: &[Vec<Moment>]) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    top1_ious(preds, gts).iter().sum::<f64>() / gts.len() as f64
}

/// Average precision of one ranked list: predictions claim the unmatched
/// ground truth they overlap most (IoU at least `theta`), in rank order;
/// the area under the precision envelope is summed at each recall step.
pub fn average_precision(ranked: &[(Moment, f64)], gts: &[Moment], theta: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut used = vec![false; gts.len()];
    let mut hits = Vec::with_capacity(ranked.len());
    for (m, _) in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            let iou = temporal_iou(m, g);
            if !used[j] && iou >= theta && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
        }
        hits.push(best.is_some());
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    // monotone envelope from the right
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    pub map_50: f64,
    pub map_75: f64,
    /// Mean over `0.5:0.05:0.95`.
    pub avg: f64,
}

/// Mean over samples of AP at `theta`.
pub fn map_at(preds: &[Prediction], gts: &[Vec<Moment>], theta: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let total: f64 =
        gts.iter().enumerate().map(|(i, g)| preds.get(i).map_or(0.0, |p| average_precision(&p.ranked, g, theta))).sum();
    total / gts.len() as f64
}

pub fn mean_ap(preds: &[Prediction], gts: &[Vec<Moment>]) -> MapSummary {
    let grid = map_thresholds();
    let avg = grid.iter().map(|&t| map_at(preds, gts, t)).sum::<f64>() / grid.len() as f64;
    MapSummary { map_50: map_at(preds, gts, 0.5), map_75: map_at(preds, gts, 0.75), avg }
}

pub const HISTOGRAM_BINS: usize = 10;

/// Spread of one query's predicted lengths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    pub lengths: Vec<f64>,
    /// Population standard deviation.
    pub std: f64,
    /// Counts over ten equal bins of `[0, 1]`; the last bin is closed.
    pub histogram: Vec<usize>,
}

pub fn concentration(lengths: &[f64]) -> Concentration {
    let n = lengths.len();
    let std = if n == 0 {
        0.0
    } else {
        let mean = lengths.iter().sum::<f64>() / n as f64;
        (lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
    };
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for &l in lengths {
        let b = ((l.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[b] += 1;
    }
    Concentration { lengths: lengths.to_vec(), std, histogram }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub r1_03: f64,
    pub r1_05: f64,
    pub r1_07: f64,
    pub map_50: f64,
    pub map_75: f64,
    pub avg_map: f64,
    pub miou: f64,
    /// Length-classification accuracy of the length token, if the model has one.
    pub length_accuracy: Option<f64>,
    /// Predicted-length standard deviation of each query.
    pub query_std: Vec<f64>,
    pub query_histograms: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn compute(preds: &[Prediction], gts: &[Vec<Moment>]) -> Self {
        let map = mean_ap(preds, gts);
        Self {
            samples: gts.len(),
            r1_03: recall_at_1(preds, gts, 0.3),
            r1_05: recall_at_1(preds, gts, 0.5),
            r1_07: recall_at_1(preds, gts, 0.7),
            map_50: map.map_50,
            map_75: map.map_75,
            avg_map: map.avg,
            miou: mean_iou(preds, gts),
            length_accuracy: None,
            query_std: Vec::new(),
            query_histograms: Vec::new(),
        }
    }

    pub fn mean_query_std(&self) -> f64 {
        if self.query_std.is_empty() {
            0.0
        } else {
            self.query_std.iter().sum::<f64>() / self.query_std.len() as f64
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Usage(format!("cannot encode metrics: {e}")))
    }

    /// Single-row CSV of the scalar metrics.
    pub fn to_csv(&self) -> String {
        let acc = self.length_accuracy.map_or(String::new(), |a| a.to_string());
        format!(
            "samples,r1_0.3,r1_0.5,r1_0.7,map_0.5,map_0.75,avg_map,miou,length_accuracy,mean_query_std\n{},{},{},{},{},{},{},{},{},{}\n",
            self.samples,
            self.r1_03,
            self.r1_05,
            self.r1_07,
            self.map_50,
            self.map_75,
            self.avg_map,
            self.miou,
            acc,
            self.mean_query_std()
        )
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

/// `bin_lo,bin_hi,count` rows of a histogram.
pub fn histogram_csv(histogram: &[usize]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    let n = histogram.len() as f64;
    for (i, c) in histogram.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", i as f64 / n, (i + 1) as f64 / n, c));
    }
    out
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop, prop_assert, proptest};

    use super::*;

    fn span(s: f64, e: f64) -> Moment {
        Moment::from_bounds(s, e).unwrap()
    }

    fn pred(spans: &[(f64, f64)]) -> Prediction {
        let n = spans.len();
        Prediction::new("x", spans.iter().enumerate().map(|(i, &(s, e))| (span(s, e), (n - i) as f64)).collect())
    }

    #[test]
    fn iou_examples() {
        let a = span(0.0, 0.10);
        assert!((temporal_iou(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(temporal_iou(&a, &span(0.2, 0.3)), 0.0);
        assert!((temporal_iou(&a, &span(0.05, 0.15)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn recall_examples() {
        let gts = vec![vec![span(0.0, 0.5)]; 3];
        // IoUs 0.75, 0.45, 0.55 against [0, 0.5]
        let preds = vec![pred(&[(0.0, 0.375)]), pred(&[(0.0, 0.225)]), pred(&[(0.0, 0.275)])];
        let ious: Vec<f64> = preds.iter().map(|p| temporal_iou(p.top().unwrap(), &gts[0][0])).collect();
        for (a, b) in ious.iter().zip([0.75, 0.45, 0.55]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((recall_at_1(&preds, &gts, 0.5) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(recall_at_1(&[], &gts, 0.5), 0.0);
        assert_eq!(recall_at_1(&[pred(&[(0.0, 0.3)])], &gts[..1], 0.5), 1.0);
    }

    #[test]
    fn miou_examples() {
        let gts = vec![vec![span(0.0, 0.1)], vec![span(0.0, 0.1)]];
        let perfect = vec![pred(&[(0.0, 0.1)]); 2];
        assert!((mean_iou(&perfect, &gts) - 1.0).abs() < 1e-12);
        assert_eq!(mean_iou(&vec![pred(&[(0.5, 0.6)]); 2], &gts), 0.0);
        let mixed = vec![pred(&[(0.0, 0.1)]), pred(&[(0.05, 0.15)])];
        assert!((mean_iou(&mixed, &gts) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn ap_examples() {
        let gt = [span(0.2, 0.4)];
        assert_eq!(average_precision(&pred(&[(0.2, 0.4)]).ranked, &gt, 0.9), 1.0);
        let p = pred(&[(0.6, 0.8), (0.2, 0.4)]);
        assert!((average_precision(&p.ranked, &gt, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn concentration_examples() {
        let c = concentration(&[0.3; 5]);
        assert_eq!(c.std, 0.0);
        let c = concentration(&[0.2, 0.4, 0.2, 0.4]);
        assert!((c.std - 0.1).abs() < 1e-15);
        assert_eq!(c.histogram.iter().sum::<usize>(), 4);
        assert_eq!(concentration(&[1.0, 0.0]).histogram, vec![1, 0, 0, 0, 0, 0, 0, 0, 0, 1]);
    }

    /// Enumerates every hit pattern and ground-truth assignment, keeps the
    /// one the rank-order rule produces, and integrates the precision
    /// envelope over the recall grid `k / G`.
    fn ap_oracle(ranked: &[(Moment, f64)], gts: &[Moment], theta: f64) -> f64 {
        let n = ranked.len();
        let g = gts.len();
        let choices = g + 1; // gt index, or g for "unmatched"
        let mut hits = None;
        for code in 0..choices.pow(n as u32) {
            let assign: Vec<usize> = (0..n).map(|i| code / choices.pow(i as u32) % choices).collect();
            let mut ok = true;
            let mut taken = vec![false; g];
            for (i, &a) in assign.iter().enumerate() {
                let free: Vec<usize> =
                    (0..g).filter(|&j| !taken[j] && temporal_iou(&ranked[i].0, &gts[j]) >= theta).collect();
                let best = free.iter().copied().fold(None, |acc: Option<usize>, j| match acc {
                    Some(b) if temporal_iou(&ranked[i].0, &gts[b]) >= temporal_iou(&ranked[i].0, &gts[j]) => Some(b),
                    _ => Some(j),
                });
                match (best, a == g) {
                    (None, true) => {}
                    (Some(b), false) if b == a => taken[a] = true,
                    _ => ok = false,
                }
            }
            if ok {
                hits = Some(assign.iter().map(|&a| a < g).collect::<Vec<bool>>());
                break;
            }
        }
        let hits = hits.expect("exactly one consistent assignment");
        let mut points = Vec::new();
        let mut tp = 0;
        for (i, &h) in hits.iter().enumerate() {
            tp += h as usize;
            points.push((tp as f64 / g as f64, tp as f64 / (i + 1) as f64));
        }
        (1..=g)
            .map(|k| {
                let r = k as f64 / g as f64;
                points.iter().filter(|(rr, _)| *rr >= r - 1e-12).map(|(_, p)| *p).fold(0.0, f64::max) / g as f64
            })
            .sum()
    }

    fn arb_span() -> impl prop::strategy::Strategy<Value = Moment> {
        use prop::strategy::Strategy;
        (0.0f64..0.9, 0.05f64..0.5).prop_map(|(s, l)| span(s, (s + l).min(1.0)))
    }

    proptest! {
        #[test]
        fn ap_matches_oracle(
            preds in prop::collection::vec(arb_span(), 0..=4),
            gts in prop::collection::vec(arb_span(), 1..=2),
            theta in prop::sample::select(vec![0.1, 0.3, 0.5, 0.7, 0.9]),
        ) {
            let ranked: Vec<(Moment, f64)> = preds.iter().enumerate().map(|(i, m)| (*m, -(i as f64))).collect();
            let a = average_precision(&ranked, &gts, theta);
            let b = ap_oracle(&ranked, &gts, theta);
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_span(), b in arb_span()) {
            let x = temporal_iou(&a, &b);
            prop_assert!((x - temporal_iou(&b, &a)).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&x));
        }
    }
}
