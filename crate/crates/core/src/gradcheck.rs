//! Central finite-difference gradient checking.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Compares `analytic` against central differences of `loss_fn` for every
/// coordinate of every parameter in `params`, returning the worst relative
/// error `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    params: &ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let first = loss_fn(params)?;
    let second = loss_fn(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let grad = analytic.get(&name);
        let n = params.get(&name)?.len();
        for i in 0..n {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = loss_fn(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = loss_fn(&probe)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.map_or(0.0, |g| g.data()[i]);
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

/// Records `build` on a fresh tape, differentiates it, and checks the result
/// against central differences of re-recorded losses.
pub fn check_recorded<F>(build: F, params: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let root = build(&mut tape, params)?;
    let analytic = tape.backward(root)?.into_params();
    let loss_fn = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let r = build(&mut t, s)?;
        Ok(t.scalar(r))
    };
    finite_difference_check(loss_fn, params, &analytic, eps)
}
