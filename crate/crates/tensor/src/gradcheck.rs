//! Central finite-difference gradient checks.
//!
//! Only forward evaluations are used to form the numeric estimate, so the
//! check is independent of every backward rule it validates.

use rand::seq::index::sample;
use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::{Graph, Tensor, Var};

/// Largest relative discrepancy found by a check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_error {
            self.max_rel_error = rel;
            self.worst = format!("{} analytic={analytic:.6e} numeric={numeric:.6e}", label());
        }
    }
}

/// Checks `d f / d inputs` for a scalar function of plain tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> GradCheckReport
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
{
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.var(t.clone())).collect();
    let out = f(&g, &vars);
    let grads = g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let g = Graph::inference();
        let vs: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        f(&g, &vs).item()
    };
    let mut report = GradCheckReport::new();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work[ti].data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work[ti].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            report.record(|| format!("input {ti}[{i}]"), analytic[ti].data()[i], numeric);
        }
    }
    report
}

/// Checks parameter gradients of a scalar loss over a [`ParamStore`].
///
/// At most `per_param` randomly chosen entries of each parameter are probed.
pub fn check_params<F, R>(
    store: &ParamStore<f64>,
    eps: f64,
    per_param: usize,
    rng: &mut R,
    f: F,
) -> Vec<(String, GradCheckReport)>
where
    F: for<'g> Fn(&'g Graph<f64>, &'g ParamStore<f64>) -> Var<'g, f64>,
    R: Rng + ?Sized,
{
    let g = Graph::new();
    let out = f(&g, store);
    let grads = g.backward(out);
    let analytic: Vec<(ParamId, Tensor<f64>)> = store
        .ids()
        .map(|pid| {
            let grad = grads
                .param(pid)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(store.get(pid).shape().to_vec()));
            (pid, grad)
        })
        .collect();
    drop(grads);
    drop(g);
    let eval = |s: &ParamStore<f64>| -> f64 {
        let g = Graph::inference();
        f(&g, s).item()
    };
    let mut work = store.clone();
    let mut out = Vec::new();
    for (pid, grad) in analytic {
        let n = grad.numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            sample(rng, n, per_param).into_vec()
        };
        let mut report = GradCheckReport::new();
        for i in picks {
            let orig = work.get(pid).data()[i];
            work.get_mut(pid).data_mut()[i] = orig + eps;
            let plus = eval(&work);
            work.get_mut(pid).data_mut()[i] = orig - eps;
            let minus = eval(&work);
            work.get_mut(pid).data_mut()[i] = orig;
            report.record(|| format!("[{i}]"), grad.data()[i], (plus - minus) / (2.0 * eps));
        }
        out.push((store.name(pid).to_string(), report));
    }
    out
}
