//! Finite-difference checks of analytic gradients using the five-point
//! central stencil, whose O(h^4) truncation error allows a step of about
//! 1e-4 and keeps round-off well below the comparison tolerance.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamGrads, ParamStore, Session};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            coordinates: self.coordinates + other.coordinates,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Derivative estimate from `at(offset)`, the function with one coordinate
/// moved by `offset`.
fn five_point(h: f64, mut at: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Usage("gradient check needs a scalar function".into()));
    }
    Ok(t.item())
}

/// Checks every coordinate of every input tensor.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    scalar_of(&g, out)?;
    let grads = g.backward(out)?;
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };
    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        for j in 0..inputs[k].len() {
            let base = inputs[k].data()[j];
            let numeric = five_point(h, |d| {
                work[k].data_mut()[j] = base + d;
                eval(&work)
            })?;
            work[k].data_mut()[j] = base;
            let analytic = grads.get(*v).map_or(0.0, |t| t.data()[j]);
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
            report.coordinates += 1;
        }
    }
    Ok(report)
}

/// Checks up to `per_param` randomly chosen coordinates of each parameter
/// against a loss built inside a [`Session`].
pub fn check_params<F>(store: &ParamStore, h: f64, per_param: usize, rng: &mut impl Rng, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut s = Session::new(store);
    let out = f(&mut s)?;
    scalar_of(&s, out)?;
    let mut raw = s.backward(out)?;
    let mut grads = ParamGrads::zeros_like(store);
    s.collect_grads(&mut raw, &mut grads);
    drop(s);

    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::inference(st);
        let out = f(&mut s)?;
        scalar_of(&s, out)
    };
    let mut work = store.clone();
    let mut report = GradCheck::default();
    for id in store.ids() {
        let n = store.get(id).len();
        let picks = sample(rng, n, per_param.min(n));
        for j in picks.iter() {
            let base = store.get(id).data()[j];
            let numeric = five_point(h, |d| {
                work.get_mut(id).data_mut()[j] = base + d;
                eval(&work)
            })?;
            work.get_mut(id).data_mut()[j] = base;
            let analytic = grads.get(id).data()[j];
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic, numeric));
            report.coordinates += 1;
        }
    }
    Ok(report)
}
