//! Tape-based reverse-mode automatic differentiation over matrices.
//!
//! A [`Graph`] records every op in execution order, so node indices are a
//! topological order and the backward pass is a single reverse sweep. Leaf
//! gradients accumulate, so a leaf used several times receives the sum of
//! its contributions. Sweeps visit nodes in a fixed order, which makes the
//! resulting gradients bit-identical for identical graphs.

use std::sync::Arc;

use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Maximum(Var, Var),
    Minimum(Var, Var),
    SoftmaxRows(Var),
    LogSumExp(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    BceWithLogits(Var, Vec<f64>),
    /// Weighted sum over the listed flat indices (median, min).
    Select(Var, Vec<(usize, f64)>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node; `None` when the node does not require grad or is
    /// unreachable from the seeds (its gradient is identically zero).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Leaf backed by a shared buffer (parameters are not copied per graph).
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = Arc::clone(&self.nodes[v.0].value);
        self.leaf_shared(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(shape_err(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn finite(value: Tensor, what: &str) -> Result<Tensor> {
        if value.all_finite() {
            Ok(value)
        } else {
            Err(Error::Numeric(format!("{what} produced a non-finite value")))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err(format!("matmul: {m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return Err(shape_err(format!("matmul_bt: {m}x{k} * ({n}x{k2})^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        self.push(t, Op::Transpose(a), &[a])
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (r, c) = self.same_shape(a, b, what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "div", |x, y| x / y)?;
        let t = Self::finite(t, "div")?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "maximum", |x, y| if x >= y { x } else { y })?;
        Ok(self.push(t, Op::Maximum(a, b), &[a, b]))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip(a, b, "minimum", |x, y| if x <= y { x } else { y })?;
        Ok(self.push(t, Op::Minimum(a, b), &[a, b]))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let ((m, n), (r, n2)) = (self.dims(a), self.dims(row));
        if r != 1 || n != n2 {
            return Err(shape_err(format!("add_row: {m}x{n} + {r}x{n2}")));
        }
        let rv = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n.max(1)) {
            for (x, y) in chunk.iter_mut().zip(rv) {
                *x += y;
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    /// Multiplies row `i` by the constant `factors[i]`; the factors carry no
    /// gradient.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if factors.len() != m {
            return Err(shape_err(format!("scale_rows: {m} rows, {} factors", factors.len())));
        }
        let mut data = self.value(a).data().to_vec();
        for (chunk, f) in data.chunks_mut(n.max(1)).zip(factors) {
            for x in chunk {
                *x *= f;
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::ScaleRows(a, factors.to_vec()), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = Self::finite(self.value(a).map(f64::exp), "exp")?;
        Ok(self.push(t, Op::Exp(a), &[a]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = Self::finite(self.value(a).map(f64::ln), "log")?;
        Ok(self.push(t, Op::Log(a), &[a]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a), &[a])
    }

    /// Elementwise `max(a, c)` for a constant `c`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x.max(c));
        self.push(t, Op::ClampMin(a, c), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let (m, n) = (src.rows(), src.cols());
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::SoftmaxRows(a), &[a]))
    }

    /// `ln(sum(exp(a)))` over all elements.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a).data();
        if src.is_empty() {
            return Err(shape_err("logsumexp of an empty tensor".into()));
        }
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = src.iter().map(|x| (x - max).exp()).sum();
        let t = Self::finite(Tensor::scalar(max + s.ln()), "logsumexp")?;
        Ok(self.push(t, Op::LogSumExp(a), &[a]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return Err(shape_err(format!("layer_norm: affine params must be 1x{n}")));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).data();
        if d.is_empty() {
            return Err(shape_err("mean of an empty tensor".into()));
        }
        let s = d.iter().sum::<f64>() / d.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), &[a]))
    }

    /// Column means: `m x n` to `1 x n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m == 0 {
            return Err(shape_err("mean_rows of a matrix with no rows".into()));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for row in src.chunks(n.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        Ok(self.push(Tensor::row(out), Op::MeanRows(a), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| shape_err("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(shape_err(format!("concat_rows: {c} columns, expected {n}")));
            }
            data.extend_from_slice(self.value(p).data());
            m += r;
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start > end || end > m {
            return Err(shape_err(format!("slice_rows {start}..{end} of {m} rows")));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let t = Tensor::matrix(end - start, n, data)?;
        Ok(self.push(t, Op::SliceRows(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| shape_err("concat_cols of nothing".into()))?;
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(shape_err(format!("concat_cols: {r} rows, expected {m}")));
            }
            n += c;
        }
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start > end || end > n {
            return Err(shape_err(format!("slice_cols {start}..{end} of {n} columns")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&src.row_slice(i)[start..end]);
        }
        let t = Tensor::matrix(m, end - start, data)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    /// Picks flat elements into a `1 x len` row.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err(format!("gather index {bad} out of {}", src.len())));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        Ok(self.push(Tensor::row(data), Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against
    /// constant targets, computed in the stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m * n {
            return Err(shape_err(format!("bce: {} logits, {} targets", m * n, targets.len())));
        }
        let data = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .collect();
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::BceWithLogits(logits, targets.to_vec()), &[logits]))
    }

    /// Median over all elements; even counts average the two middle values.
    pub fn median(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a).data();
        if src.is_empty() {
            return Err(shape_err("median of an empty tensor".into()));
        }
        let mut order: Vec<usize> = (0..src.len()).collect();
        order.sort_by(|&i, &j| src[i].total_cmp(&src[j]).then(i.cmp(&j)));
        let n = order.len();
        let picks =
            if n % 2 == 1 { vec![(order[n / 2], 1.0)] } else { vec![(order[n / 2 - 1], 0.5), (order[n / 2], 0.5)] };
        let v = picks.iter().map(|&(i, w)| w * src[i]).sum();
        Ok(self.push(Tensor::scalar(v), Op::Select(a, picks), &[a]))
    }

    /// Minimum over all elements (first index on ties).
    pub fn min_all(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a).data();
        let idx = (0..src.len())
            .min_by(|&i, &j| src[i].total_cmp(&src[j]).then(i.cmp(&j)))
            .ok_or_else(|| shape_err("min of an empty tensor".into()))?;
        let v = src[idx];
        Ok(self.push(Tensor::scalar(v), Op::Select(a, vec![(idx, 1.0)]), &[a]))
    }

    /// Backward sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backward sweep seeded with upstream gradients for several outputs.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(shape_err(format!(
                    "seed for node {} has {} values, node has {}",
                    v.0,
                    g.len(),
                    self.value(*v).len()
                )));
            }
            if self.nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; g.len()]);
                for (b, x) in buf.iter_mut().zip(g.data()) {
                    *b += x;
                }
            }
        }
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(node.value.shape().to_vec(), g).expect("leaf grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let n = self.nodes[v.0].value.len();
                f(grads[v.0].get_or_insert_with(|| vec![0.0; n]));
            }
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                acc(*a, &mut |ga| matmul_bt_into(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| matmul_at_into(val(*a), g, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                acc(*a, &mut |ga| matmul_into_acc(g, val(*b), ga, m, n, k));
                acc(*b, &mut |gb| matmul_at_into(g, val(*a), gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a);
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(bv).for_each(|((x, y), z)| *x += y * z));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(av).for_each(|((x, y), z)| *x += y * z));
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(bv).for_each(|((x, y), z)| *x += y / z));
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] -= g[j] * av[j] / (bv[j] * bv[j]);
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.dims(*a).1;
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(n.max(1)) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::ScaleRows(a, factors) => {
                let n = self.dims(*a).1;
                acc(*a, &mut |ga| {
                    for ((gr, gu), f) in ga.chunks_mut(n.max(1)).zip(g.chunks(n.max(1))).zip(factors) {
                        gr.iter_mut().zip(gu).for_each(|(x, y)| *x += f * y);
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        if av[j] > 0.0 {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * y[j] * (1.0 - y[j]);
                    }
                });
            }
            Op::Exp(a) => {
                let y = out.data();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(y).for_each(|((x, u), v)| *x += u * v));
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(av).for_each(|((x, u), v)| *x += u / v));
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        let s = if av[j] > 0.0 {
                            1.0
                        } else if av[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        ga[j] += g[j] * s;
                    }
                });
            }
            Op::ClampMin(a, c) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        if av[j] > *c {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(self.nodes[i].op, Op::Maximum(..));
                let (av, bv) = (val(*a), val(*b));
                let pick_a = |j: usize| if is_max { av[j] >= bv[j] } else { av[j] <= bv[j] };
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        if pick_a(j) {
                            ga[j] += g[j];
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        if !pick_a(j) {
                            gb[j] += g[j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = self.dims(*a).1.max(1);
                let y = out.data();
                acc(*a, &mut |ga| {
                    for ((gr, gu), yr) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gu.iter().zip(yr).map(|(u, v)| u * v).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (gu[j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let av = val(*a);
                let lse = out.item();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[0] * (av[j] - lse).exp();
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = self.dims(*x).1.max(1);
                let gv = val(*gamma);
                acc(*x, &mut |gx| {
                    for (r, ((gxr, gu), hr)) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate() {
                        // dxhat = g * gamma
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            let d = gu[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for j in 0..n {
                            let d = gu[j] * gv[j];
                            gxr[j] += rstd[r] * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (gu, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gu[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gu in g.chunks(n) {
                        add_into(gb, gu);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let inv = 1.0 / self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] * inv));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.dims(*a);
                let inv = 1.0 / m as f64;
                acc(*a, &mut |ga| {
                    for gr in ga.chunks_mut(n.max(1)) {
                        gr.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let n = self.dims(*a).1;
                acc(*a, &mut |ga| add_into(&mut ga[start * n..start * n + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let (m, c) = self.dims(p);
                    acc(p, &mut |gp| {
                        for r in 0..m {
                            add_into(&mut gp[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let w = out.cols();
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        add_into(&mut ga[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Gather(a, indices) => {
                acc(*a, &mut |ga| {
                    for (k, &idx) in indices.iter().enumerate() {
                        ga[idx] += g[k];
                    }
                });
            }
            Op::BceWithLogits(a, targets) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * (sigmoid(av[j]) - targets[j]);
                    }
                });
            }
            Op::Select(a, picks) => {
                acc(*a, &mut |ga| {
                    for &(idx, w) in picks {
                        ga[idx] += g[0] * w;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

/// `out[m x k] += a[m x n] * b[n x k]`, accumulating.
fn matmul_into_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    matmul_into(a, b, out, m, n, k);
}
