//! Central finite-difference checks of parameter gradients.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};

/// Largest discrepancy found by [`check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

/// Compares analytic gradients of `loss` against central differences with
/// step `h` for every entry of `ids`. Relative error is
/// `|a − n| / max(|a|, |n|, floor)`, so entries with tiny gradients are
/// judged on an absolute scale of `floor`.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    h: f64,
    floor: f64,
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?.params(store);
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(&mut t, s)?;
        Ok(t.value(l).item())
    };
    let mut work = store.clone();
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    for &id in ids {
        let n = store.value(id).numel();
        let analytic = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for e in 0..n {
            let orig = store.value(id).data()[e];
            work.value_mut(id).data_mut()[e] = orig + h;
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[e] = orig - h;
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[e];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            out.checked += 1;
            if err > out.max_rel_err || out.checked == 1 {
                out.max_rel_err = err;
                out.worst = (store.get(id).name.clone(), e);
            }
        }
    }
    Ok(out)
}
