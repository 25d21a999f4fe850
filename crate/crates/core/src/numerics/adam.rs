use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::params::{ParamGrads, ParamStore};
use crate::numerics::tensor::Tensor;

/// Linear decay from `base_lr` to zero over `total_steps`, no warmup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDecay {
    pub base_lr: f64,
    pub total_steps: u64,
}

impl LinearDecay {
    /// Learning rate after `completed` optimizer steps.
    pub fn lr_at(&self, completed: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let remaining = 1.0 - completed as f64 / self.total_steps as f64;
        self.base_lr * remaining.max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub schedule: LinearDecay,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig, schedule: LinearDecay) -> Self {
        let zeros = || -> Vec<Tensor> {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
                .collect()
        };
        Self {
            config,
            schedule,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Number of steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Applies one bias-corrected update and returns the learning rate used.
    ///
    /// The whole step is rejected, leaving parameters and moments untouched, if
    /// any gradient entry is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) -> Result<f64> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} grads for {} params", grads.len(), params.len()),
            ));
        }
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(Error::shape("adam_step", params.name(id).to_string()));
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }

        let lr = self.schedule.lr_at(self.t);
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);

        for id in params.ids() {
            let i = id.index();
            let g = grads.get(id).map(Tensor::data);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = params.get_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(lr)
    }
}
