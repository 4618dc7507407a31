//! Naive reference math used as test oracles. Deliberately written with
//! nested vectors and loops so it shares no code with the graph kernels.

pub type M = Vec<Vec<f64>>;

pub fn matmul(a: &M, b: &M) -> M {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i][j] += a[i][t] * b[t][j];
            }
        }
    }
    out
}

pub fn transpose(a: &M) -> M {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &M, b: &M) -> M {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_bias(a: &M, b: &[f64]) -> M {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

pub fn scale(a: &M, c: f64) -> M {
    a.iter().map(|r| r.iter().map(|x| x * c).collect()).collect()
}

pub fn relu(a: &M) -> M {
    a.iter().map(|r| r.iter().map(|x| x.max(0.0)).collect()).collect()
}

pub fn softmax_rows(a: &M) -> M {
    a.iter()
        .map(|r| {
            let e: Vec<f64> = r.iter().map(|x| x.exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Layer norm with unit gain and zero shift.
pub fn layer_norm(a: &M, eps: f64) -> M {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
            r.iter().map(|x| (x - mu) / (var + eps).sqrt()).collect()
        })
        .collect()
}

/// Single-head attention with identity Q/K/V/O projections and zero biases.
pub fn identity_attention(q: &M, k: &M, v: &M) -> M {
    let d = q[0].len() as f64;
    let w = softmax_rows(&scale(&matmul(q, &transpose(k)), 1.0 / d.sqrt()));
    matmul(&w, v)
}

pub fn identity(n: usize) -> M {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn assert_close(a: &M, b: &[f64], tol: f64) {
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    assert_eq!(flat.len(), b.len(), "length mismatch");
    for (i, (x, y)) in flat.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: oracle {x} vs {y}");
    }
}
