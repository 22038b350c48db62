use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::Array;
use super::params::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates per parameter plus the shared step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
    pub step: u64,
}

/// One bias-corrected Adam update. `lr_of` maps a parameter name to its
/// learning rate, which is how parameter groups get separate rates.
/// Parameters without a gradient are left untouched.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr_of: &dyn Fn(&str) -> f64,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let lr = lr_of(name);
        let m = state.m.entry(name.clone()).or_insert_with(|| Array::zeros(p.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Array::zeros(p.shape()));
        let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}
