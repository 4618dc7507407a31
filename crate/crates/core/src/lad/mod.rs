//! Length-aware decoder: anchors, suppression bookkeeping across layers,
//! and the decoder network itself.

mod anchors;
mod decoder;

pub use anchors::kmeans_anchors;
pub use decoder::{DecodeOutput, Decoder, DecoderLayer, LayerOutput, LayerTrace, RsControl};

use log::debug;

/// Each query's group scalar.
pub fn rs_allocation(group_rs: &[f64], roles: &[usize]) -> Vec<f64> {
    roles.iter().map(|&r| group_rs[r]).collect()
}

/// Mean of the `top` highest confidences in each group. A count larger
/// than a group is clamped to the group size.
pub fn top_select(confidences: &[f64], roles: &[usize], groups: usize, top: usize) -> Vec<f64> {
    (0..groups)
        .map(|g| {
            let mut c: Vec<f64> = roles.iter().zip(confidences).filter(|(&r, _)| r == g).map(|(_, &c)| c).collect();
            if c.is_empty() {
                return 0.0;
            }
            if top > c.len() {
                debug!("top-select count {top} clamped to group size {}", c.len());
            }
            c.sort_by(|a, b| b.total_cmp(a));
            let n = top.clamp(1, c.len());
            c[..n].iter().sum::<f64>() / n as f64
        })
        .collect()
}

/// Elementwise minimum: suppression only tightens.
pub fn rs_update(prev: &[f64], new: &[f64]) -> Vec<f64> {
    prev.iter().zip(new).map(|(a, b)| a.min(*b)).collect()
}

/// Flags the `k` most confident queries among those with a negative
/// scalar; ties go to the lower index.
pub fn topk_save(per_query_rs: &[f64], confidences: &[f64], k: usize) -> Vec<bool> {
    let mut candidates: Vec<usize> = (0..per_query_rs.len()).filter(|&q| per_query_rs[q] < 0.0).collect();
    candidates.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    let mut saved = vec![false; per_query_rs.len()];
    for &q in candidates.iter().take(k) {
        saved[q] = true;
    }
    saved
}

/// Suppression actually applied to each query: zero when the sample is
/// masked out or the query is saved.
pub fn effective_rs(group_rs: &[f64], roles: &[usize], saved: &[bool], mask: bool) -> Vec<f64> {
    roles.iter().zip(saved).map(|(&r, &s)| if !mask || s { 0.0 } else { group_rs[r] }).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    use super::*;

    #[test]
    fn allocation_broadcasts_group_scalars() {
        assert_eq!(rs_allocation(&[0.0, -0.2, -0.4], &[0, 0, 1, 1, 2, 2]), vec![0.0, 0.0, -0.2, -0.2, -0.4, -0.4]);
        assert_eq!(rs_allocation(&[0.0; 3], &[0, 1, 2, 2]), vec![0.0; 4]);
        let got = rs_allocation(&[-0.1, -0.2, -0.3], &[0, 0, 0, 1, 1, 2]);
        for (g, want) in [(-0.1, 3), (-0.2, 2), (-0.3, 1)] {
            assert_eq!(got.iter().filter(|&&x| x == g).count(), want);
        }
    }

    #[test]
    fn top_select_examples() {
        assert_eq!(top_select(&[0.4; 6], &[0, 0, 1, 1, 2, 2], 3, 2), vec![0.4; 3]);
        assert_eq!(top_select(&[0.1, 0.7, 0.3, 0.2], &[0, 0, 1, 1], 2, 1), vec![0.7, 0.3]);
        let p = top_select(&[0.9, 0.5, 0.1], &[0, 0, 0], 1, 2);
        assert!((p[0] - 0.7).abs() < 1e-15);
        // a count beyond the group size averages the whole group
        assert!((top_select(&[0.9, 0.5, 0.1], &[0, 0, 0], 1, 5)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rs_update_examples() {
        assert_eq!(rs_update(&[0.0, -0.2, -0.4], &[-0.1, 0.0, -0.5]), vec![-0.1, -0.2, -0.5]);
        let a = [0.0, -0.3];
        assert_eq!(rs_update(&a, &a), a.to_vec());
    }

    #[test]
    fn topk_save_examples() {
        assert_eq!(topk_save(&[-0.2, -0.2], &[0.8, 0.3], 0), vec![false, false]);
        assert_eq!(topk_save(&[-0.2, 0.0, -0.2], &[0.8, 0.9, 0.3], 5), vec![true, false, true]);
        assert_eq!(topk_save(&[-0.2, -0.2], &[0.8, 0.3], 1), vec![true, false]);
        assert_eq!(topk_save(&[-0.2, -0.2, -0.1], &[0.5, 0.5, 0.5], 1), vec![true, false, false]);
    }

    #[test]
    fn saved_and_masked_queries_are_unsuppressed() {
        let g = [-0.3, -0.5];
        assert_eq!(effective_rs(&g, &[0, 1, 1], &[false, true, false], true), vec![-0.3, 0.0, -0.5]);
        assert_eq!(effective_rs(&g, &[0, 1, 1], &[false, false, false], false), vec![0.0; 3]);
    }

    proptest! {
        #[test]
        fn rs_update_absorbs(a in prop::collection::vec(-1.0f64..0.0, 3), b in prop::collection::vec(-1.0f64..0.0, 3)) {
            let ab = rs_update(&a, &b);
            prop_assert_eq!(rs_update(&a, &ab), ab.clone());
            prop_assert_eq!(rs_update(&ab, &ab), ab.clone());
            for i in 0..3 {
                prop_assert!(ab[i] <= a[i] && ab[i] <= b[i]);
            }
        }
    }
}
