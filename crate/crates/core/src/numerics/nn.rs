//! Layers built on the autodiff graph: linear maps, MLPs, layer norm,
//! multi-head attention and transformer sub-blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Var;
use super::params::{ParamId, ParamStore, Session};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `y = x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.xavier(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = store.zeros(format!("{name}.bias"), &[1, out_dim]);
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        let y = s.matmul(x, w)?;
        s.add_row(y, b)
    }
}

/// Affine layers with ReLU between them; the last layer is linear.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least input and output sizes");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h)?;
            if i < last {
                h = s.relu(h);
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0));
        let beta = store.zeros(format!("{name}.beta"), &[1, dim]);
        Self { gamma, beta }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        s.layer_norm(x, g, b, Self::EPS)
    }
}

/// Scaled dot-product attention with learned Q/K/V/output projections.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads >= 1 && dim.is_multiple_of(heads), "model dim {dim} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, rng, &format!("{name}.q"), dim, dim),
            key: Linear::new(store, rng, &format!("{name}.k"), dim, dim),
            value: Linear::new(store, rng, &format!("{name}.v"), dim, dim),
            output: Linear::new(store, rng, &format!("{name}.o"), dim, dim),
            heads,
        }
    }

    /// Attention of `q_in` (T x D) over keys `k_in` and values `v_in` (S x D).
    pub fn forward(&self, s: &mut Session, q_in: Var, k_in: Var, v_in: Var) -> Result<Var> {
        let dim = self.query.in_dim;
        for (what, v) in [("query", q_in), ("key", k_in), ("value", v_in)] {
            if s.value(v).cols() != dim {
                return Err(Error::Shape(format!(
                    "attention {what} has {} columns, expected {dim}",
                    s.value(v).cols()
                )));
            }
        }
        if s.value(k_in).rows() != s.value(v_in).rows() {
            return Err(Error::Shape("attention keys and values differ in length".into()));
        }
        let q = self.query.forward(s, q_in)?;
        let k = self.key.forward(s, k_in)?;
        let v = self.value.forward(s, v_in)?;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let context = if self.heads == 1 {
            scaled_dot_product(s, q, k, v, scale)?
        } else {
            let mut parts = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let (a, b) = (h * head_dim, (h + 1) * head_dim);
                let qh = s.slice_cols(q, a, b)?;
                let kh = s.slice_cols(k, a, b)?;
                let vh = s.slice_cols(v, a, b)?;
                parts.push(scaled_dot_product(s, qh, kh, vh, scale)?);
            }
            s.concat_cols(&parts)?
        };
        self.output.forward(s, context)
    }

    /// Self-attention with positional encodings added to queries and keys.
    pub fn self_attention(&self, s: &mut Session, tokens: Var, positional: Option<Var>) -> Result<Var> {
        let qk = match positional {
            Some(p) => s.add(tokens, p)?,
            None => tokens,
        };
        self.forward(s, qk, qk, tokens)
    }
}

fn scaled_dot_product(s: &mut Session, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
    let scores = s.matmul_bt(q, k)?;
    let scores = s.scale(scores, scale);
    let weights = s.softmax_rows(scores)?;
    s.matmul(weights, v)
}

/// Two-layer ReLU feed-forward block.
pub fn feed_forward(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize) -> Mlp {
    Mlp::new(store, rng, name, &[dim, hidden, dim])
}

/// Post-norm transformer encoder layer: self-attention and feed-forward,
/// each wrapped in a residual connection followed by layer normalization.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attention: Attention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            attention: Attention::new(store, rng, &format!("{name}.attn"), dim, heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: feed_forward(store, rng, &format!("{name}.ffn"), dim, hidden),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, positional: Option<Var>) -> Result<Var> {
        let a = self.attention.self_attention(s, x, positional)?;
        let x = s.add(x, a)?;
        let x = self.norm1.forward(s, x)?;
        let f = self.ffn.forward(s, x)?;
        let x = s.add(x, f)?;
        self.norm2.forward(s, x)
    }
}

/// Sinusoidal encoding of normalized coordinates in `[0, 1]`.
///
/// Frequencies are geometric between `pi` and `32 pi`, so neighbouring clips
/// of a few dozen are distinguishable while the encoding stays smooth.
pub fn sinusoidal_encoding(coords: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; coords.len() * dim];
    for (r, &x) in coords.iter().enumerate() {
        for i in 0..half {
            let t = if half > 1 { i as f64 / (half - 1) as f64 } else { 0.0 };
            let w = std::f64::consts::PI * 32f64.powf(t);
            data[r * dim + 2 * i] = (x * w).sin();
            data[r * dim + 2 * i + 1] = (x * w).cos();
        }
    }
    Tensor::matrix(coords.len(), dim, data).expect("encoding shape")
}

/// Normalized centres of `n` equal clips.
pub fn clip_centers(n: usize) -> Vec<f64> {
    (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(store: &mut ParamStore, id: ParamId, rows: &[Vec<f64>]) {
        store.set(id, Tensor::from_rows(rows).unwrap()).unwrap();
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[3, 4, 2]);
        for l in &mlp.layers {
            let shape = store.get(l.weight).shape().to_vec();
            store.set(l.weight, Tensor::zeros(&shape)).unwrap();
        }
        set(&mut store, mlp.layers[1].bias, &[vec![0.25, -1.5]]);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.0, 9.0]]).unwrap());
        let y = mlp.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[2, 2]);
        set(&mut store, mlp.layers[0].weight, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::row(vec![0.3, -7.0]));
        let y = mlp.forward(&mut s, x).unwrap();
        assert_eq!(s.value(y).data(), &[0.3, -7.0]);
    }

    /// Matrix-multiply oracle for a two-layer net with hand-set weights.
    #[test]
    fn two_layer_matches_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut rng, "m", &[2, 2, 1]);
        set(&mut store, mlp.layers[0].weight, &[vec![1.0, -1.0], vec![0.5, 2.0]]);
        set(&mut store, mlp.layers[0].bias, &[vec![0.1, -0.2]]);
        set(&mut store, mlp.layers[1].weight, &[vec![2.0], vec![3.0]]);
        set(&mut store, mlp.layers[1].bias, &[vec![0.5]]);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::row(vec![1.0, 1.0]));
        let y = mlp.forward(&mut s, x).unwrap();
        // hidden = relu([1 + 0.5 + 0.1, -1 + 2 - 0.2]) = [1.6, 0.8]; out = 3.2 + 2.4 + 0.5
        assert!((s.value(y).item() - 6.1).abs() < 1e-12);
    }

    #[test]
    fn single_token_attention_is_value_then_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "a", 4, 1);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::row(vec![0.2, -0.4, 1.0, 0.5]));
        let y = attn.self_attention(&mut s, x, None).unwrap();
        let got = s.value(y).clone();
        let v = attn.value.forward(&mut s, x).unwrap();
        let want = attn.output.forward(&mut s, v).unwrap();
        assert!(got.max_abs_diff(s.value(want)) < 1e-15);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "a", 4, 2);
        let mut s = Session::new(&store);
        let row = vec![0.7, 0.1, -0.3, 0.9];
        let x = s.constant(Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap());
        let y = attn.self_attention(&mut s, x, None).unwrap();
        let out = s.value(y);
        for r in 1..3 {
            assert_eq!(out.row_slice(r), out.row_slice(0));
        }
    }

    /// Hand computation of Q K^T / sqrt(d), softmax and weighted sum for T=2.
    #[test]
    fn two_token_attention_matches_hand_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "a", 2, 1);
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        for l in [&attn.query, &attn.key, &attn.value, &attn.output] {
            set(&mut store, l.weight, &eye);
        }
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap());
        let y = attn.self_attention(&mut s, x, None).unwrap();
        // scores row0 = [1, 0]/sqrt2, row1 = [0, 4]/sqrt2
        let r2 = 2f64.sqrt();
        let a0 = [1.0 / r2, 0.0];
        let a1 = [0.0, 4.0 / r2];
        let sm = |a: [f64; 2]| {
            let e0 = a[0].exp();
            let e1 = a[1].exp();
            [e0 / (e0 + e1), e1 / (e0 + e1)]
        };
        let (w0, w1) = (sm(a0), sm(a1));
        let want = [w0[0], 2.0 * w0[1], w1[0], 2.0 * w1[1]];
        for (g, w) in s.value(y).data().iter().zip(want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn attention_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, &mut rng, "a", 4, 1);
        let mut s = Session::new(&store);
        let x = s.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(attn.self_attention(&mut s, x, None), Err(Error::Shape(_))));
    }
}
