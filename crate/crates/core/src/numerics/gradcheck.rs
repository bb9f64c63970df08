use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::params::{ParamId, ParamStore};

/// Gradients smaller than this are compared in absolute terms. Central
/// differences of an O(1) loss cannot resolve much below `ulp / eps` anyway.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Outcome of a central-difference gradient comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index where the maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

/// Which entries of each trainable tensor to probe.
#[derive(Debug, Clone, Copy)]
pub enum Probe {
    All,
    /// At most this many evenly spaced entries per tensor.
    PerTensor(usize),
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// `loss` must build a scalar on the given graph from the given store. The
/// relative error of an entry is `|analytic − numeric| / max(|analytic|, |numeric|, GRAD_FLOOR)`.
/// Only trainable parameters are probed.
pub fn finite_diff_check<F>(
    loss: F,
    store: &ParamStore,
    eps: f64,
    probe: Probe,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(s, &mut g)?;
        g.ensure_finite()?;
        Ok(g.value(v).item())
    };

    let mut g = Graph::new();
    let out = loss(store, &mut g)?;
    g.ensure_finite()?;
    let base = g.value(out).item();
    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(base, again));
    }
    let grads = g.backward(out);

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let len = store.tensor(id).len();
        let analytic = grads.param(id);
        for idx in probe_indices(len, probe) {
            let orig = store.tensor(id).data()[idx];
            work.tensor_mut(id).data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work.tensor_mut(id).data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work.tensor_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), idx));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

fn probe_indices(len: usize, probe: Probe) -> Vec<usize> {
    match probe {
        Probe::All => (0..len).collect(),
        Probe::PerTensor(k) if k >= len => (0..len).collect(),
        Probe::PerTensor(k) => {
            let mut v: Vec<usize> = (0..k).map(|i| i * len / k + (len / k) / 2).collect();
            v.dedup();
            v
        }
    }
}
