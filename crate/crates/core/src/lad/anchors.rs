//! k-means anchors over training spans.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datamodel::Moment;
use crate::error::{Error, Result};

const MAX_ITERS: usize = 100;
const TOLERANCE: f64 = 1e-9;

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Index of the nearest centroid; the lowest index wins ties.
fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = dist2(p, *c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn seed_plus_plus(points: &[[f64; 2]], k: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[nearest(p, &centroids)])).collect();
        let pick = match WeightedIndex::new(&weights) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.gen_range(0..points.len()),
        };
        centroids.push(points[pick]);
    }
    centroids
}

/// Lloyd's algorithm on `(center, length)` with k-means++ seeding.
/// Anchors come back sorted by length, then centre.
pub fn kmeans_anchors(moments: &[Moment], k: usize, seed: u64) -> Result<Vec<Moment>> {
    if k == 0 {
        return Err(Error::Config("need at least one anchor".into()));
    }
    if moments.len() < k {
        return Err(Error::Config(format!("{} training moments cannot seed {k} anchors", moments.len())));
    }
    let points: Vec<[f64; 2]> = moments.iter().map(|m| [m.center, m.length]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(&points, k, &mut rng);
    for _ in 0..MAX_ITERS {
        let mut sums = vec![[0.0; 2]; k];
        let mut counts = vec![0usize; k];
        for &p in &points {
            let c = nearest(p, &centroids);
            sums[c][0] += p[0];
            sums[c][1] += p[1];
            counts[c] += 1;
        }
        let mut shift: f64 = 0.0;
        for i in 0..k {
            if counts[i] > 0 {
                let next = [sums[i][0] / counts[i] as f64, sums[i][1] / counts[i] as f64];
                shift = shift.max(dist2(next, centroids[i]).sqrt());
                centroids[i] = next;
            }
        }
        if shift < TOLERANCE {
            break;
        }
    }
    centroids.sort_by(|a, b| a[1].total_cmp(&b[1]).then(a[0].total_cmp(&b[0])));
    Ok(centroids
        .into_iter()
        .map(|[c, l]| {
            let m = Moment { center: c, length: l, seconds: None };
            if m.validate().is_ok() {
                m
            } else {
                m.clamped()
            }
        })
        .collect())
}
