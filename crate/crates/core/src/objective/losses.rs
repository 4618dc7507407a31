//! Set-matched moment loss, length-classification losses and the weighted
//! total.

use serde::{Deserialize, Serialize};

use super::hungarian::hungarian_match;
use crate::config::{ClassifierKind, Lambdas, LossTerms};
use crate::datamodel::Moment;
use crate::error::{Error, Result};
use crate::lad::LayerOutput;
use crate::numerics::{Graph, Tensor, Var};

/// Moment-loss weights, also used for the matching cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentWeights {
    pub l1: f64,
    pub giou: f64,
    pub conf: f64,
}

impl Default for MomentWeights {
    fn default() -> Self {
        Self { l1: 10.0, giou: 1.0, conf: 4.0 }
    }
}

/// Generalized IoU of two `(center, length)` spans, in `[-1, 1]`.
pub fn giou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (as_, ae) = (a[0] - 0.5 * a[1], a[0] + 0.5 * a[1]);
    let (bs, be) = (b[0] - 0.5 * b[1], b[0] + 0.5 * b[1]);
    let inter = (ae.min(be) - as_.max(bs)).max(0.0);
    let union = a[1] + b[1] - inter;
    let hull = ae.max(be) - as_.min(bs);
    inter / union - (hull - union) / hull
}

/// `cost[g][q]` for ground truth `g` and query `q`.
pub fn match_cost(spans: &[[f64; 2]], confidences: &[f64], gts: &[Moment], w: MomentWeights) -> Vec<Vec<f64>> {
    gts.iter()
        .map(|g| {
            let t = [g.center, g.length];
            spans
                .iter()
                .zip(confidences)
                .map(|(p, &c)| {
                    let l1 = (p[0] - t[0]).abs() + (p[1] - t[1]).abs();
                    w.l1 * l1 + w.giou * (1.0 - giou(*p, t)) - w.conf * c
                })
                .collect()
        })
        .collect()
}

/// Loss of one decoder layer and the matched query of each ground truth.
///
/// Span terms are summed over matched pairs and divided by the number of
/// ground truths; the confidence term is the mean binary cross-entropy over
/// all queries (matched ones target 1).
pub fn layer_moment_loss(
    g: &mut Graph,
    layer: &LayerOutput,
    gts: &[Moment],
    w: MomentWeights,
) -> Result<(Var, Vec<usize>)> {
    let n = layer.span_values.len();
    let cost = match_cost(&layer.span_values, &layer.confidences, gts, w);
    let matched = hungarian_match(&cost)?;
    let m = gts.len();

    let ci: Vec<usize> = matched.iter().map(|&q| 2 * q).collect();
    let li: Vec<usize> = matched.iter().map(|&q| 2 * q + 1).collect();
    let pc = g.gather(layer.spans, &ci)?;
    let pl = g.gather(layer.spans, &li)?;
    let tc = g.constant(Tensor::row(gts.iter().map(|t| t.center).collect()));
    let tl = g.constant(Tensor::row(gts.iter().map(|t| t.length).collect()));

    let dc = g.sub(pc, tc)?;
    let dl = g.sub(pl, tl)?;
    let (dc, dl) = (g.abs(dc), g.abs(dl));
    let (dc, dl) = (g.sum(dc), g.sum(dl));
    let l1 = g.add(dc, dl)?;

    let half_p = g.scale(pl, 0.5);
    let ps = g.sub(pc, half_p)?;
    let pe = g.add(pc, half_p)?;
    let ts = g.constant(Tensor::row(gts.iter().map(Moment::start).collect()));
    let te = g.constant(Tensor::row(gts.iter().map(Moment::end).collect()));
    let lo = g.maximum(ps, ts)?;
    let hi = g.minimum(pe, te)?;
    let inter = g.sub(hi, lo)?;
    let inter = g.clamp_min(inter, 0.0);
    let total_len = g.add(pl, tl)?;
    let union = g.sub(total_len, inter)?;
    let hull_hi = g.maximum(pe, te)?;
    let hull_lo = g.minimum(ps, ts)?;
    let hull = g.sub(hull_hi, hull_lo)?;
    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let gap = g.div(gap, hull)?;
    let giou = g.sub(iou, gap)?;
    let giou_sum = g.sum(giou);
    // sum of (1 - gIoU) over pairs
    let giou_term = g.scale(giou_sum, -1.0);
    let giou_term = g.add_scalar(giou_term, m as f64);

    let l1 = g.scale(l1, w.l1);
    let giou_term = g.scale(giou_term, w.giou);
    let span = g.add(l1, giou_term)?;
    let span = g.scale(span, 1.0 / m as f64);

    let mut targets = vec![0.0; n];
    for &q in &matched {
        targets[q] = 1.0;
    }
    let ce = g.bce_with_logits(layer.conf_logits, &targets)?;
    let ce = g.mean(ce)?;
    let ce = g.scale(ce, w.conf);
    Ok((g.add(span, ce)?, matched))
}

/// Moment loss summed over every decoder layer.
pub fn moment_loss(g: &mut Graph, layers: &[LayerOutput], gts: &[Moment], w: MomentWeights) -> Result<Var> {
    if gts.is_empty() {
        return Err(Error::Matching("sample has no ground-truth moments".into()));
    }
    let mut total: Option<Var> = None;
    for layer in layers {
        let (l, _) = layer_moment_loss(g, layer, gts, w)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    total.ok_or_else(|| Error::Usage("moment loss needs at least one decoder layer".into()))
}

/// Per-sample classification loss of `1 x k` logits against one category:
/// the sum of `k` binary cross-entropies, or the softmax cross-entropy.
pub fn sample_length_ce(g: &mut Graph, logits: Var, label: usize, kind: ClassifierKind) -> Result<Var> {
    let k = g.value(logits).len();
    if label >= k {
        return Err(Error::Shape(format!("label {label} out of {k} categories")));
    }
    match kind {
        ClassifierKind::Binary => {
            let targets: Vec<f64> = (0..k).map(|i| if i == label { 1.0 } else { 0.0 }).collect();
            let b = g.bce_with_logits(logits, &targets)?;
            Ok(g.sum(b))
        }
        ClassifierKind::Softmax => {
            let lse = g.logsumexp(logits)?;
            let z = g.gather(logits, &[label])?;
            let z = g.sum(z);
            g.sub(lse, z)
        }
    }
}

/// Graph handles of the batch-level classification losses.
#[derive(Clone, Copy, Debug)]
pub struct LengthLossVars {
    pub mean: Option<Var>,
    pub weight: Option<Var>,
    pub median: Option<Var>,
    pub total: Var,
}

pub const WEIGHT_EPS: f64 = 1e-8;

/// Batch classification losses from per-sample cross-entropies `ce`
/// (`1 x B`) and quality scores `qs` (`1 x B`).
///
/// `mean` is the plain average, `weight` the `Qs`-weighted average and
/// `median` is `|median(Qs) - min(Qs)|`. Terms that need `qs` are skipped
/// without it.
pub fn length_cls_loss(g: &mut Graph, ce: Var, qs: Option<Var>, terms: LossTerms) -> Result<LengthLossVars> {
    let b = g.value(ce).len();
    if b == 0 {
        return Err(Error::Usage("length loss of an empty batch".into()));
    }
    if let Some(q) = qs {
        if g.value(q).len() != b {
            return Err(Error::Shape(format!("{} quality scores for {b} samples", g.value(q).len())));
        }
    }
    let mean = if terms.mean { Some(g.mean(ce)?) } else { None };
    let (weight, median) = match qs {
        Some(q) => {
            let weight = if terms.weight {
                let prod = g.mul(q, ce)?;
                let num = g.sum(prod);
                let den = g.sum(q);
                let den = g.clamp_min(den, WEIGHT_EPS);
                Some(g.div(num, den)?)
            } else {
                None
            };
            let median = if terms.median {
                let med = g.median(q)?;
                let min = g.min_all(q)?;
                let d = g.sub(med, min)?;
                Some(g.abs(d))
            } else {
                None
            };
            (weight, median)
        }
        None => (None, None),
    };
    let mut total = g.constant(Tensor::scalar(0.0));
    for part in [mean, weight, median].into_iter().flatten() {
        total = g.add(total, part)?;
    }
    Ok(LengthLossVars { mean, weight, median, total })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthLossParts {
    pub mean: f64,
    pub weight: f64,
    pub median: f64,
    pub total: f64,
}

/// Every loss term of one batch and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub moment: f64,
    pub saliency: f64,
    pub alignment: f64,
    pub length: LengthLossParts,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(moment: f64, saliency: f64, alignment: f64, length: LengthLossParts, lambdas: &Lambdas) -> Self {
        let total = total_loss(moment, saliency, alignment, length.total, lambdas);
        Self { moment, saliency, alignment, length, total }
    }

    pub fn is_finite(&self) -> bool {
        [self.moment, self.saliency, self.alignment, self.length.total, self.total].iter().all(|x| x.is_finite())
    }

    pub const CSV_HEADER: &'static str =
        "moment,saliency,alignment,length_mean,length_weight,length_median,length,total";

    pub fn csv_row(&self) -> String {
        let l = &self.length;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.moment, self.saliency, self.alignment, l.mean, l.weight, l.median, l.total, self.total
        )
    }
}

/// `L_mo + l_sal * L_sal + l_alig * L_alig + l_lencl * L_lencl`.
pub fn total_loss(moment: f64, saliency: f64, alignment: f64, length: f64, lambdas: &Lambdas) -> f64 {
    moment + lambdas.sal * saliency + lambdas.alig * alignment + lambdas.lencl * length
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop, prop_assert, proptest};

    use super::*;
    use crate::numerics::gradcheck::check_inputs;

    fn layer(g: &mut Graph, spans: &[[f64; 2]], logits: &[f64]) -> LayerOutput {
        let sv: Vec<f64> = spans.iter().flatten().copied().collect();
        let s = g.leaf(Tensor::matrix(spans.len(), 2, sv).unwrap(), true);
        let c = g.leaf(Tensor::column(logits.to_vec()), true);
        LayerOutput {
            spans: s,
            conf_logits: c,
            span_values: spans.to_vec(),
            confidences: logits.iter().map(|&z| crate::numerics::sigmoid(z)).collect(),
        }
    }

    #[test]
    fn giou_range() {
        assert!((giou([0.5, 0.2], [0.5, 0.2]) - 1.0).abs() < 1e-15);
        // disjoint [0.1,0.2] and [0.7,0.9]: iou 0, hull 0.8, union 0.3
        let v = giou([0.15, 0.1], [0.8, 0.2]);
        assert!((v - (0.0 - 0.5 / 0.8)).abs() < 1e-12);
        assert!(1.0 - v > 1.0);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let mut g = Graph::new();
        let gt = Moment::new(0.4, 0.2).unwrap();
        let l = layer(&mut g, &[[0.4, 0.2], [0.7, 0.1]], &[40.0, -40.0]);
        let loss = moment_loss(&mut g, &[l], &[gt], MomentWeights::default()).unwrap();
        assert!(g.value(loss).item() < 1e-15, "{}", g.value(loss).item());
    }

    #[test]
    fn one_pair_by_hand() {
        // prediction [0.2, 0.6] vs truth [0.3, 0.5]
        let mut g = Graph::new();
        let gt = Moment::from_bounds(0.3, 0.5).unwrap();
        let l = layer(&mut g, &[[0.4, 0.4]], &[0.0]);
        let (loss, matched) = layer_moment_loss(&mut g, &l, &[gt], MomentWeights::default()).unwrap();
        assert_eq!(matched, vec![0]);
        // L1 = |0.4-0.4| + |0.4-0.2| = 0.2; IoU = 0.2/0.4, hull = union, gIoU = 0.5
        // BCE(sigmoid(0), 1) = ln 2
        let want = 10.0 * 0.2 + (1.0 - 0.5) + 4.0 * std::f64::consts::LN_2;
        assert!((g.value(loss).item() - want).abs() < 1e-12);
    }

    #[test]
    fn confidence_breaks_matching_ties() {
        let mut g = Graph::new();
        let gt = Moment::new(0.5, 0.2).unwrap();
        let l = layer(&mut g, &[[0.5, 0.2], [0.5, 0.2]], &[-1.0, 2.0]);
        let (_, matched) = layer_moment_loss(&mut g, &l, &[gt], MomentWeights::default()).unwrap();
        assert_eq!(matched, vec![1]);
    }

    #[test]
    fn moment_loss_gradients() {
        let gts = [Moment::new(0.35, 0.3).unwrap(), Moment::new(0.7, 0.2).unwrap()];
        let spans = Tensor::matrix(3, 2, vec![0.3, 0.25, 0.62, 0.15, 0.5, 0.4]).unwrap();
        let logits = Tensor::column(vec![0.3, -0.2, 0.1]);
        let r = check_inputs(&[spans.clone(), logits.clone()], 1e-4, |g, v| {
            let lo = LayerOutput {
                spans: v[0],
                conf_logits: v[1],
                span_values: spans.data().chunks(2).map(|c| [c[0], c[1]]).collect(),
                confidences: logits.data().iter().map(|&z| crate::numerics::sigmoid(z)).collect(),
            };
            moment_loss(g, &[lo], &gts, MomentWeights::default())
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    fn batch(ce: &[f64], qs: &[f64], terms: LossTerms) -> (f64, f64, f64, f64) {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::row(ce.to_vec()), true);
        let q = g.leaf(Tensor::row(qs.to_vec()), true);
        let l = length_cls_loss(&mut g, c, Some(q), terms).unwrap();
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        (v(l.mean), v(l.weight), v(l.median), g.value(l.total).item())
    }

    #[test]
    fn length_loss_examples() {
        let all = LossTerms::default();
        let (mean, weight, _, _) = batch(&[0.3, 1.2, 0.7], &[0.4, 0.4, 0.4], all);
        assert!((mean - weight).abs() < 1e-12);
        let (_, _, median, _) = batch(&[1.0; 3], &[0.9, 0.5, 0.1], all);
        assert!((median - 0.4).abs() < 1e-15);
        let (_, _, median, _) = batch(&[1.0; 4], &[0.3; 4], all);
        assert_eq!(median, 0.0);
        // even batch: median is the mean of the middle pair
        let (_, _, median, _) = batch(&[1.0; 4], &[0.1, 0.9, 0.3, 0.5], all);
        assert!((median - 0.3).abs() < 1e-15);
        let (m, w, d, t) = batch(&[0.2, 0.6], &[0.8, 0.2], all);
        assert!((t - (m + w + d)).abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut g = Graph::new();
        let c = g.leaf(Tensor::new(vec![1, 0], vec![]).unwrap(), true);
        assert!(length_cls_loss(&mut g, c, None, LossTerms::default()).is_err());
    }

    #[test]
    fn perfect_predictions_give_small_ce() {
        let mut g = Graph::new();
        let z = g.leaf(Tensor::row(vec![-40.0, 40.0, -40.0]), true);
        let ce = sample_length_ce(&mut g, z, 1, ClassifierKind::Binary).unwrap();
        assert!(g.value(ce).item() < 1e-15);
        let ce = sample_length_ce(&mut g, z, 1, ClassifierKind::Softmax).unwrap();
        assert!(g.value(ce).item() < 1e-30);
    }

    #[test]
    fn length_losses_pass_gradient_check() {
        let ce = Tensor::row(vec![0.3, 1.1, 0.6, 0.9]);
        let qs = Tensor::row(vec![0.7, 0.2, 0.55, 0.4]);
        let r =
            check_inputs(&[ce, qs], 1e-4, |g, v| Ok(length_cls_loss(g, v[0], Some(v[1]), LossTerms::default())?.total))
                .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
        let z = Tensor::row(vec![0.3, -1.0, 0.8]);
        for kind in [ClassifierKind::Binary, ClassifierKind::Softmax] {
            let r = check_inputs(std::slice::from_ref(&z), 1e-4, |g, v| sample_length_ce(g, v[0], 2, kind)).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
        }
    }

    #[test]
    fn eq5_examples() {
        let lam = Lambdas::default();
        let parts = LengthLossParts { mean: 0.5, weight: 0.3, median: 0.2, total: 1.0 };
        let b = LossBreakdown::new(1.0, 1.0, 1.0, parts, &lam);
        assert!((b.total - 3.3).abs() < 1e-15);
        let zero = Lambdas { sal: 0.0, alig: 0.0, lencl: 0.0 };
        assert_eq!(total_loss(2.5, 7.0, 3.0, 9.0, &zero), 2.5);
        let l3 = Lambdas { sal: 1.0, alig: 0.3, lencl: 3.0 };
        assert_eq!(total_loss(0.0, 0.0, 0.0, 2.0, &l3), 6.0);
    }

    proptest! {
        #[test]
        fn weight_gradient_sign(ce in prop::collection::vec(0.01f64..3.0, 2..8), qs in prop::collection::vec(0.05f64..0.95, 8)) {
            let b = ce.len();
            let qs = &qs[..b];
            let mut g = Graph::new();
            let c = g.leaf(Tensor::row(ce.clone()), false);
            let q = g.leaf(Tensor::row(qs.to_vec()), true);
            let l = length_cls_loss(&mut g, c, Some(q), LossTerms { mean: false, weight: true, median: false }).unwrap();
            let lw = g.value(l.total).item();
            let grads = g.backward(l.total).unwrap();
            let dq = grads.get(q).unwrap().data();
            for i in 0..b {
                let diff = ce[i] - lw;
                if diff.abs() > 1e-9 {
                    prop_assert!(dq[i].signum() == diff.signum());
                }
            }
        }

        #[test]
        fn median_term_is_nonnegative(qs in prop::collection::vec(0.0f64..1.0, 1..9)) {
            let (_, _, median, _) = batch(&vec![1.0; qs.len()], &qs, LossTerms::default());
            prop_assert!(median >= 0.0);
        }
    }
}
