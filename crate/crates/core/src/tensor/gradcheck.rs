//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::{Graph, ParamId, ParamStore, Var};
use crate::error::{arg_err, Result};
use crate::rng::{self, Stream};

/// Which coordinates of each parameter tensor to probe.
#[derive(Debug, Clone, Copy)]
pub enum Sampling {
    All,
    /// Up to this many coordinates per tensor, drawn with a fixed seed.
    PerTensor(usize, u64),
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
    /// Worst error per parameter tensor, in store order.
    pub per_tensor: Vec<(String, f64)>,
}

/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn evaluate<F>(store: &ParamStore<f64>, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    Ok(g.value(loss).item())
}

/// Analytic gradients of `loss_fn` with respect to every stored parameter.
pub fn analytic_gradients<F>(store: &mut ParamStore<f64>, loss_fn: &mut F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    g.backward_into(loss, store)?;
    let grads = store.ids().map(|id| store.grad(id).data().to_vec()).collect();
    store.zero_grad();
    Ok(grads)
}

/// Compares `analytic` against central differences of `loss_fn`.
pub fn compare_with_finite_differences<F>(
    store: &mut ParamStore<f64>,
    analytic: &[Vec<f64>],
    mut loss_fn: F,
    eps: f64,
    sampling: Sampling,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(arg_err!("finite-difference step must be positive, got {eps}"));
    }
    if analytic.len() != store.len() {
        return Err(arg_err!("{} analytic gradients for {} parameters", analytic.len(), store.len()));
    }
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        per_tensor: Vec::new(),
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = match sampling {
            Sampling::All => (0..n).collect(),
            Sampling::PerTensor(k, seed) if k < n => {
                let mut r = rng::indexed_stream(seed, Stream::GradCheck, id.index() as u64);
                let mut v = sample(&mut r, n, k).into_vec();
                v.sort_unstable();
                v
            }
            Sampling::PerTensor(..) => (0..n).collect(),
        };
        let mut tensor_worst = 0f64;
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = evaluate(store, &mut loss_fn)?;
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = evaluate(store, &mut loss_fn)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[id.index()][i], numeric);
            report.coordinates_checked += 1;
            tensor_worst = tensor_worst.max(err);
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                if err >= report.max_relative_error {
                    report.worst = Some((store.name(id).to_string(), i));
                }
            }
        }
        report.per_tensor.push((store.name(id).to_string(), tensor_worst));
    }
    Ok(report)
}

/// Full check: analytic gradients by reverse accumulation, compared against
/// central differences with step `eps`.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    mut loss_fn: F,
    eps: f64,
    sampling: Sampling,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &mut loss_fn)?;
    compare_with_finite_differences(store, &analytic, loss_fn, eps, sampling)
}
