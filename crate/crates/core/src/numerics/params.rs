//! Named parameter storage and per-graph parameter binding.

use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

/// Serializable snapshot of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    /// Xavier-uniform `fan_in x fan_out` matrix.
    pub fn xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..=a)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data).expect("xavier shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn count_scalars(&self) -> usize {
        self.values.iter().map(|t| t.len()).sum()
    }

    pub fn snapshot(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, t)| NamedTensor { name: name.clone(), tensor: (**t).clone() })
            .collect()
    }

    /// Restores values from a snapshot; names and shapes must match exactly.
    pub fn restore(&mut self, snapshot: &[NamedTensor]) -> Result<()> {
        if snapshot.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                snapshot.len(),
                self.values.len()
            )));
        }
        for (i, nt) in snapshot.iter().enumerate() {
            if nt.name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} is {:?} in checkpoint, {:?} in model",
                    nt.name, self.names[i]
                )));
            }
            self.set(ParamId(i), nt.tensor.clone())?;
        }
        Ok(())
    }
}

/// Dense gradient buffers, one per parameter.
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect() }
    }

    pub fn from_tensors(grads: Vec<Tensor>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn add_from(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.grads {
            for x in g.data_mut() {
                *x *= c;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

/// A [`Graph`] bound to a parameter store. Each parameter becomes a leaf the
/// first time it is used and is shared by every later use in the graph.
pub struct Session<'s> {
    graph: Graph,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: vec![None; store.len()], trainable: true }
    }

    /// Session whose parameters carry no gradient (evaluation).
    pub fn inference(store: &'s ParamStore) -> Self {
        Self { trainable: false, ..Self::new(store) }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.leaf_shared(self.store.shared(id), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Adds this graph's parameter gradients into `out`.
    pub fn collect_grads(&self, grads: &mut Gradients, out: &mut ParamGrads) {
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(g) = grads.take(*v) {
                    for (x, y) in out.grads[i].data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
    }
}

impl Deref for Session<'_> {
    type Target = Graph;
    fn deref(&self) -> &Graph {
        &self.graph
    }
}

impl DerefMut for Session<'_> {
    fn deref_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }
}
