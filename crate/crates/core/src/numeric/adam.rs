use serde::{Deserialize, Serialize};

use super::params::{ParamStore, PartitionSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for every parameter in a store.
///
/// Each parameter keeps its own step count for bias correction, since a
/// masked step leaves the parameters outside the mask untouched.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    param_steps: Vec<u64>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| vec![0.0; p.tensor.len()])
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
            param_steps: vec![0; store.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one bias-corrected Adam update to the parameters whose
    /// partition is in `mask`, then zeroes every gradient in the store.
    pub fn step(&mut self, store: &mut ParamStore, mask: PartitionSet) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::State(format!(
                "moments cover {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        for (i, p) in store.iter().map(|(_, p)| p).enumerate() {
            if self.first[i].len() != p.tensor.len() {
                return Err(Error::State(format!(
                    "moment buffer for {} has {} entries, parameter has {}",
                    p.name,
                    self.first[i].len(),
                    p.tensor.len()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;

        for (i, p) in store.iter_mut().enumerate() {
            if !mask.contains(p.partition) || !p.trainable {
                continue;
            }
            self.param_steps[i] += 1;
            let t = self.param_steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let (values, grad) = p.tensor.values_and_grad();
            if grad.is_empty() {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..values.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

/// Rescales gradients in `mask` so their global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, mask: PartitionSet, max_norm: f64) -> f64 {
    let norm = store.grad_norm(mask);
    if max_norm > 0.0 && norm > max_norm {
        store.scale_grads(mask, max_norm / norm);
    }
    norm
}
