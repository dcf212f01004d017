//! Adam with decoupled weight decay.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bad_config, Error, Result};
use crate::graph::RunningStatUpdate;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first and second moments. Moments are kept in `f64`
/// whatever the parameter precision.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<ParamId, Vec<f64>>,
    pub v: BTreeMap<ParamId, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0) || !config.learning_rate.is_finite() {
            return Err(bad_config!(
                "learning rate must be positive, got {}",
                config.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(bad_config!("Adam betas must lie in [0, 1)"));
        }
        if !(config.weight_decay >= 0.0) || !(config.eps > 0.0) {
            return Err(bad_config!(
                "weight decay must be non-negative and eps positive"
            ));
        }
        Ok(Self {
            config,
            state: AdamState::default(),
        })
    }

    /// Applies one update. A gradient for a frozen parameter is an error and
    /// leaves the store untouched.
    pub fn step<F: Scalar>(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>) -> Result<()> {
        for (id, g) in grads.iter() {
            if store.is_frozen(id) {
                return Err(Error::FrozenGradientLeak(store.get(id).name.clone()));
            }
            if g.shape() != store.value(id).shape() {
                return Err(Error::ShapeMismatch {
                    expected: store.value(id).shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
        }
        let c = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        for (id, g) in grads.iter() {
            let n = g.numel();
            let m = self.state.m.entry(id).or_insert_with(|| vec![0.0; n]);
            let v = self.state.v.entry(id).or_insert_with(|| vec![0.0; n]);
            let p = store.value_mut(id).data_mut();
            for i in 0..n {
                let gi = g.data()[i].as_f64();
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut w = p[i].as_f64();
                w -= c.learning_rate * c.weight_decay * w;
                w -= c.learning_rate * mhat / (libm::sqrt(vhat) + c.eps);
                p[i] = F::of(w);
            }
        }
        Ok(())
    }
}

/// Momentum used for batch-norm running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Folds batch statistics into the running buffers.
pub fn apply_running_updates<F: Scalar>(
    store: &mut ParamStore<F>,
    updates: &[RunningStatUpdate<F>],
) {
    for u in updates {
        for (id, batch) in [(u.mean_id, &u.batch_mean), (u.var_id, &u.batch_var)] {
            for (r, &b) in store.value_mut(id).data_mut().iter_mut().zip(batch) {
                *r = F::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * b.as_f64());
            }
        }
    }
}
