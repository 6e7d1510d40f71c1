//! AdamW with decoupled weight decay.

use super::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment state for one parameter buffer.
#[derive(Clone, Debug, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of `params` in place, at 1-based step `t`.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut Moments, t: u64, cfg: &AdamWConfig) {
    debug_assert_eq!(params.len(), grads.len());
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        let p = params[k];
        params[k] = p - cfg.lr * cfg.weight_decay * p - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer state over the trainable entries of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads` is aligned with the store's entries; entries
    /// that are frozen or have no gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>]) {
        self.step += 1;
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), Moments::default);
        }
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if !entry.trainable {
                continue;
            }
            let zero;
            let g = match grads.get(i).and_then(|g| g.as_deref()) {
                Some(g) => g,
                None => {
                    zero = vec![0.0; entry.value.len()];
                    &zero
                }
            };
            adamw_step(entry.value.data_mut(), g, &mut self.moments[i], self.step, &self.config);
        }
    }
}
