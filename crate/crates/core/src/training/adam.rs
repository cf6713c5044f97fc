//! Adam with bias-corrected moments over the flattened parameter vector.

use crate::network::{Model, ModelGrads};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First and second moments, laid out like [`Model::flatten`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn for_model(model: &Model) -> Self {
        Self::new(model.num_params())
    }
}

/// One Adam update. Moment arithmetic runs in f64 and is stored as f32.
pub fn adam_step(
    model: &mut Model,
    grads: &ModelGrads,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) {
    let g = grads.flatten();
    let mut theta = model.flatten();
    assert_eq!(g.len(), theta.len(), "gradient/parameter count");
    assert_eq!(state.m.len(), theta.len(), "optimizer state/parameter count");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        let gi = f64::from(g[i]);
        let m = cfg.beta1 * f64::from(state.m[i]) + (1.0 - cfg.beta1) * gi;
        let v = cfg.beta2 * f64::from(state.v[i]) + (1.0 - cfg.beta2) * gi * gi;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let update = lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        theta[i] = (f64::from(theta[i]) - update) as f32;
    }
    model.set_flat(&theta);
}
