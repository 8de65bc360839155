//! Central-difference verification of analytic gradients.

use super::graph::{Graph, NodeId};
use super::param::ParamStore;
use crate::error::{Error, Result};

/// Compare backward-pass gradients against central differences.
///
/// `build` must construct the loss deterministically from the store (no
/// dropout, no RNG), because it is re-evaluated at perturbed parameter
/// values. Every coordinate of every parameter is perturbed by `h`; the
/// returned value is the maximum relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// Parameter values are restored bit-exactly; gradients are left zeroed.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Parameter(format!(
            "step size {h} outside [1e-6, 1e-4]"
        )));
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        let v = g.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss in grad_check".to_string()));
        }
        Ok(v)
    };

    // Analytic pass.
    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss)?;
    g.apply_grads(store)?;
    let analytic: Vec<(super::param::ParamId, crate::numerics::Matrix)> = store
        .ids()
        .map(|id| (id, store.get(id).grad.clone()))
        .collect();

    let mut max_err: f64 = 0.0;
    for (id, grad) in &analytic {
        let (rows, cols) = grad.shape();
        for r in 0..rows {
            for c in 0..cols {
                let orig = store.get(*id).value.at(r, c);
                store.get_mut(*id).value.set(r, c, orig + h);
                let fp = eval(store)?;
                store.get_mut(*id).value.set(r, c, orig - h);
                let fm = eval(store)?;
                store.get_mut(*id).value.set(r, c, orig);

                let numeric = (fp - fm) / (2.0 * h);
                let a = grad.at(r, c);
                let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
                max_err = max_err.max(err);
            }
        }
    }
    store.zero_grads();
    Ok(max_err)
}
