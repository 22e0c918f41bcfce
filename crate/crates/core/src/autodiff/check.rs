//! Central-difference gradient verification.
//!
//! Every differentiable objective in the crate is expressed as a
//! [`ScalarFn`]: a builder that assembles a fresh graph over a parameter
//! bundle and returns the scalar loss node. The checker perturbs every
//! scalar parameter in turn and compares `(f(θ+h) − f(θ−h)) / 2h` against
//! the reverse-mode gradient, with the relative error denominator floored
//! at 1 so near-zero gradients are compared absolutely.

use rayon::prelude::*;

use super::bundle::ParamBundle;
use super::graph::{Graph, GraphError, GraphResult, NodeId};

/// A scalar objective over a parameter bundle, with an efficient
/// value-plus-gradient entry point. Blanket-implemented for graph builders.
pub trait ScalarFn: Sync {
    fn value(&self, theta: &ParamBundle) -> GraphResult<f64>;
    fn value_and_grad(&self, theta: &ParamBundle) -> GraphResult<(f64, ParamBundle)>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Graph, &ParamBundle) -> GraphResult<NodeId> + Sync,
{
    fn value(&self, theta: &ParamBundle) -> GraphResult<f64> {
        let mut g = Graph::new();
        let loss = self(&mut g, theta)?;
        g.scalar_value(loss)
    }

    fn value_and_grad(&self, theta: &ParamBundle) -> GraphResult<(f64, ParamBundle)> {
        let mut g = Graph::new();
        let loss = self(&mut g, theta)?;
        let value = g.scalar_value(loss)?;
        let grads = g.backward(loss)?;
        let mut out = ParamBundle::new();
        for (name, _) in theta.iter() {
            let grad = g.param_grad(&grads, name)?;
            out.insert(name, grad).expect("unique parameter names");
        }
        Ok((value, out))
    }
}

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct LeafReport {
    pub name: String,
    /// Worst relative error across the scalar entries of this parameter.
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Names of the leaves that exceeded tolerance, for error messages.
    pub fn failures(&self) -> Vec<&str> {
        self.leaves
            .iter()
            .filter(|l| !(l.max_rel_err <= self.tol))
            .map(|l| l.name.as_str())
            .collect()
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Central-difference check of `f`'s reverse-mode gradient at `theta`.
///
/// Every scalar entry of every parameter is perturbed by ±`step`
/// independently (the two evaluations run in parallel across entries; each
/// evaluation itself is sequential and deterministic).
pub fn grad_check<F: ScalarFn>(
    f: &F,
    theta: &ParamBundle,
    step: f64,
    tol: f64,
) -> GraphResult<GradCheckReport> {
    let (value, analytic) = f.value_and_grad(theta)?;
    if !value.is_finite() {
        return Err(GraphError::NonFinite { op: "grad_check" });
    }

    // Flatten to (param index, entry index) tasks.
    let mut tasks = Vec::new();
    for (pi, (_, arr)) in theta.iter().enumerate() {
        for ei in 0..arr.numel() {
            tasks.push((pi, ei));
        }
    }

    let names: Vec<String> = theta.iter().map(|(n, _)| n.to_string()).collect();

    let errs: Vec<GraphResult<(usize, f64)>> = tasks
        .par_iter()
        .map(|&(pi, ei)| {
            let name = &names[pi];
            let eval = |delta: f64| -> GraphResult<f64> {
                let mut t = theta.clone();
                t.get_mut(name)
                    .expect("name from iteration")
                    .data_mut()[ei] += delta;
                f.value(&t)
            };
            let fp = eval(step)?;
            let fm = eval(-step)?;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic
                .get(name)
                .expect("analytic bundle mirrors theta")
                .data()[ei];
            Ok((pi, rel_err(a, numeric)))
        })
        .collect();

    let mut per_leaf = vec![0.0f64; names.len()];
    for e in errs {
        let (pi, err) = e?;
        per_leaf[pi] = per_leaf[pi].max(err);
    }

    let leaves: Vec<LeafReport> = names
        .into_iter()
        .zip(per_leaf)
        .map(|(name, max_rel_err)| LeafReport { name, max_rel_err })
        .collect();
    let max_rel_err = leaves.iter().map(|l| l.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        leaves,
        max_rel_err,
        tol,
        pass: max_rel_err <= tol,
    })
}
