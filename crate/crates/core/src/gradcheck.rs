//! Central finite-difference checks of tape gradients.
//!
//! The numeric side only ever evaluates the scalar objective, so it is
//! independent of every backward rule in [`crate::autograd`].

use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;

/// Relative error `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-5;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub worst_pair: (f64, f64),
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    libm::fabs(analytic - numeric) / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares backward-pass gradients of the scalar built by `build`
/// against central differences, for up to `per_param` evenly spaced
/// entries of every parameter in `store`.
pub fn check<F>(store: &mut ParamStore, build: F, eps: f64, per_param: usize) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = build(&mut g, store)?;
    let grads = g.backward(out);
    let analytic: Vec<Option<Vec<f64>>> = store
        .iter()
        .map(|(id, _)| grads.param(id).map(|t| t.data().to_vec()))
        .collect();
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = build(&mut g, s)?;
        Ok(g.value(v).item())
    };

    let mut report = GradCheck { checked: 0, max_rel_err: 0.0, worst: (String::new(), 0), worst_pair: (0.0, 0.0) };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).numel();
        let step = (n / per_param.max(1)).max(1);
        for k in (0..n).step_by(step).take(per_param) {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[id.0].as_ref().map_or(0.0, |v| v[k]);
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (store.param(id).name.clone(), k);
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}
