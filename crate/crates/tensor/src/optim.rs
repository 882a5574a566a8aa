use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::{Gradients, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        }
    }
}

struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

/// Adam with per-parameter step counts.
///
/// A parameter that receives no gradient in a step is left untouched, so a
/// task that does not reach a module never moves it.
pub struct Adam<T> {
    pub config: AdamConfig,
    state: HashMap<ParamId, Moments<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    /// Applies one update with learning rate `lr` and an optional per-parameter scale.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: f64,
        lr_scale: impl Fn(ParamId) -> f64,
    ) {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (pid, grad) in grads {
            let st = self.state.entry(*pid).or_insert_with(|| Moments {
                m: vec![T::zero(); grad.numel()],
                v: vec![T::zero(); grad.numel()],
                steps: 0,
            });
            st.steps += 1;
            let bc1 = 1.0 - beta1.powi(st.steps as i32);
            let bc2 = 1.0 - beta2.powi(st.steps as i32);
            let step_size = T::of(lr * lr_scale(*pid) * bc2.sqrt() / bc1);
            let (b1, b2) = (T::of(beta1), T::of(beta2));
            let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
            let eps_hat = T::of(eps * bc2.sqrt());
            let wd = T::of(weight_decay * lr);
            let param = store.get_mut(*pid);
            for (((p, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                if weight_decay > 0.0 {
                    *p -= wd * *p;
                }
                *p -= step_size * *m / (v.sqrt() + eps_hat);
            }
        }
    }
}

/// Scales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = T::of(max_norm / total);
        for (_, g) in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    total
}

/// Collects owned parameter gradients, optionally multiplied by `scale`.
pub fn collect_param_grads<T: Scalar>(grads: &Gradients<T>, scale: f64) -> Vec<(ParamId, Tensor<T>)> {
    let s = T::of(scale);
    let mut out: Vec<_> = grads
        .params()
        .map(|(pid, g)| {
            let g = if scale == 1.0 { g.clone() } else { g.map(|v| v * s) };
            (pid, g)
        })
        .collect();
    out.sort_by_key(|(pid, _)| *pid);
    out
}

/// Warmup followed by inverse square-root decay, peaking at `peak` after `warmup` steps.
pub fn inverse_sqrt_lr(step: u64, warmup: u64, peak: f64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}
