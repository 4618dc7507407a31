//! Minimum-cost bipartite matching of ground truths to queries.

use crate::error::{Error, Result};

/// Shortest-augmenting-path Hungarian method for an `n x m` cost matrix with
/// `n <= m`. Returns the column of each row and the total cost.
fn solve(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    let m = cost[0].len();
    // 1-based potentials and matching, column 0 is a virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (assign, total)
}

fn sub_cost(cost: &[Vec<f64>], rows: std::ops::Range<usize>, cols: &[usize]) -> f64 {
    let sub: Vec<Vec<f64>> = cost[rows].iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect();
    solve(&sub).1
}

/// Optimal assignment of each row (ground truth) to a distinct column
/// (query). Among optimal assignments the lexicographically smallest column
/// sequence wins.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Matching("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::Matching(format!("{n} ground truths cannot be matched to {m} queries")));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Matching("cost matrix contains non-finite entries".into()));
    }
    let (mut assign, best) = solve(cost);
    let tol = 1e-9 * best.abs().max(1.0);
    let mut free: Vec<usize> = (0..m).collect();
    let mut spent = 0.0;
    for i in 0..n {
        for (slot, &j) in free.iter().enumerate() {
            let mut rest = free.clone();
            rest.remove(slot);
            if spent + cost[i][j] + sub_cost(cost, i + 1..n, &rest) <= best + tol {
                assign[i] = j;
                spent += cost[i][j];
                free = rest;
                break;
            }
        }
    }
    Ok(assign)
}
