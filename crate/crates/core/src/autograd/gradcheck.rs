use super::graph::{Graph, Var};
use super::tensor::ParamStore;
use crate::error::Result;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead of FD round-off.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares backprop gradients with central differences for every
/// coordinate of every parameter in `store`.
///
/// `build` must construct the same deterministic scalar loss each call.
pub fn grad_check<F>(store: &mut ParamStore, mut build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, t)| t.grad().to_vec()).collect();
    store.zero_grads();

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, store)?;
        Ok(g.item(l))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).values()[j];
            store.get_mut(id).values_mut()[j] = orig + FD_STEP;
            let up = eval(store)?;
            store.get_mut(id).values_mut()[j] = orig - FD_STEP;
            let down = eval(store)?;
            store.get_mut(id).values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = relative_error(analytic[id.index()][j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((store.name(id).to_string(), j));
                }
            }
        }
    }
    Ok(report)
}
