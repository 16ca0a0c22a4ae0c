//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use crate::{NumericsError, ParamGrads, ParamStore, Tensor};

/// Rescales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`. Returns the norm measured before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

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
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Moment estimates and step counter for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Self {
            config,
            step: 0,
            first: store.values().iter().map(zeros).collect(),
            second: store.values().iter().map(zeros).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update:
    /// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps)) - lr * wd * theta`.
    ///
    /// Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &ParamGrads,
    ) -> Result<(), NumericsError> {
        if store.len() != self.first.len() {
            return Err(NumericsError::Invalid {
                op: "adamw_step",
                reason: format!(
                    "optimizer tracks {} parameters, store has {}",
                    self.first.len(),
                    store.len()
                ),
            });
        }
        for (id, g) in grads.iter() {
            if g.shape() != store.get(id).shape() {
                return Err(NumericsError::Shape {
                    op: "adamw_step",
                    left: store.get(id).shape(),
                    right: g.shape(),
                });
            }
        }

        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);

        for (id, g) in grads.iter() {
            let m = self.first[id.0].data_mut();
            let v = self.second[id.0].data_mut();
            let theta = store.get_mut(id).data_mut();
            for i in 0..theta.len() {
                let gi = g.data()[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                theta[i] -= lr * (m_hat / (v_hat.sqrt() + eps)) + lr * weight_decay * theta[i];
            }
        }
        Ok(())
    }
}
