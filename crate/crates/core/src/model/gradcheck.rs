//! Five-point central finite-difference check of parameter gradients.

use rand::Rng as _;

use crate::grad::{GradError, Graph, Var};
use crate::rng::child_rng;

use super::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and coordinate of the worst match.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric values at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
}

/// Compares analytic gradients of `loss` with central differences at `samples`
/// parameter coordinates drawn from `seed`. Coordinates whose analytic gradient
/// exceeds [`LIVE_GRADIENT`] are preferred, since below that the difference
/// quotient is dominated by rounding. Relative error is `|a - n| / (|a| + floor)`.
pub const LIVE_GRADIENT: f64 = 1e-6;

pub fn check_gradients<E, F>(
    model: &mut Model,
    loss: F,
    samples: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> Result<GradCheckReport, E>
where
    E: From<GradError>,
    F: Fn(&Model, &mut Graph) -> Result<Var, E>,
{
    model.store.zero_grads();
    let mut g = Graph::new();
    let l = loss(model, &mut g)?;
    g.backward(l)?;
    g.accumulate_param_grads(&mut model.store);

    let ids: Vec<_> = model.store.ids().collect();
    let mut live = Vec::new();
    for &id in &ids {
        for (k, v) in model.store.grad(id).data().iter().enumerate() {
            if v.abs() > LIVE_GRADIENT {
                live.push((id, k));
            }
        }
    }
    let mut rng = child_rng(seed, "gradcheck");
    let eval = |m: &Model| -> Result<f64, E> {
        let mut g = Graph::new();
        let l = loss(m, &mut g)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: None, worst_values: None };
    for _ in 0..samples {
        let (id, k) = if !live.is_empty() {
            live[rng.gen_range(0..live.len())]
        } else {
            let id = ids[rng.gen_range(0..ids.len())];
            (id, rng.gen_range(0..model.store.value(id).len()))
        };
        let analytic = model.store.grad(id).data()[k];
        let orig = model.store.value(id).data()[k];
        let mut at = |h: f64| -> Result<f64, E> {
            model.store.value_mut(id).data_mut()[k] = orig + h;
            eval(model)
        };
        let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
        model.store.value_mut(id).data_mut()[k] = orig;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
        let err = (analytic - numeric).abs() / (analytic.abs() + floor);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((model.store.name(id).to_string(), k));
            report.worst_values = Some((analytic, numeric));
        }
    }
    model.store.zero_grads();
    Ok(report)
}
