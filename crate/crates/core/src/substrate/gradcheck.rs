//! Central finite-difference oracle for reverse-mode gradients.

use crate::error::Result;
use crate::substrate::{Graph, ParamId, ParamStore, Var};

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Worst entry found by [`finite_diff_check`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn is_empty(&self) -> bool {
        self.checked == 0
    }
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares `backward` against central differences for every scalar of the
/// selected parameters (all parameters when `params` is `None`).
///
/// `build` must construct the same scalar loss from the store each call.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    params: Option<&[ParamId]>,
    step: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = match params {
        Some(p) => p.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport::default();
    if ids.is_empty() {
        return Ok(report);
    }
    let analytic = {
        let mut g = Graph::new();
        let loss = build(&mut g, store)?;
        g.backward(loss)?
    };
    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::no_grad();
        let loss = build(&mut g, store)?;
        Ok(g.value(loss).item())
    };
    for id in ids {
        let n = store.get(id).len();
        let grad = analytic.get(store, id).map(|t| t.data().to_vec());
        for k in 0..n {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.as_ref().map_or(0.0, |g| g[k]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k, a, numeric));
            }
        }
    }
    Ok(report)
}
