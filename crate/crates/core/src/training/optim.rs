use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{GradientMap, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, keyed like the parameters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut BTreeMap<String, Tensor>, grads: &GradientMap, state: &mut AdamState, stepsize: f64) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else { continue };
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((p, m), v), g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= stepsize * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
}

pub fn global_norm(grads: &GradientMap) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint l2 norm is at most `max_norm`.
/// Returns the clipped map and the norm before clipping.
pub fn clip_grad_norm(grads: GradientMap, max_norm: f64) -> (GradientMap, f64) {
    let norm = global_norm(&grads);
    if norm <= max_norm {
        return (grads, norm);
    }
    let s = max_norm / norm;
    (grads.into_iter().map(|(k, t)| (k, t.map(|g| g * s))).collect(), norm)
}
