use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Matrix,
    v: Matrix,
    t: u64,
}

/// Adam with decoupled weight decay.
///
/// Moment buffers are keyed by parameter slot name. A slot whose shape changes
/// (the pseudo-label classifier block is resized every epoch) restarts with
/// fresh moments and its own bias-correction counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Drops the moments of one slot.
    pub fn reset_slot(&mut self, name: &str) {
        self.slots.remove(name);
    }

    pub fn moment_shape(&self, name: &str) -> Option<(usize, usize)> {
        self.slots.get(name).map(|s| s.m.shape())
    }

    /// One update of every listed parameter. Nothing is modified unless all
    /// gradients are present, shape-compatible and finite.
    pub fn step(&mut self, params: &mut [(&str, &mut Matrix)], grads: &Gradients) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::State(format!("no gradient for parameter slot `{name}`")))?;
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("slot `{name}`: grad {:?} vs param {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::Numeric {
                    slot: name.to_string(),
                });
            }
        }

        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).expect("checked above");
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: Matrix::zeros(p.rows(), p.cols()),
                    v: Matrix::zeros(p.rows(), p.cols()),
                    t: 0,
                });
            if slot.m.shape() != p.shape() {
                *slot = Moments {
                    m: Matrix::zeros(p.rows(), p.cols()),
                    v: Matrix::zeros(p.rows(), p.cols()),
                    t: 0,
                };
            }
            slot.t += 1;
            let bc1 = 1.0 - beta1.powi(slot.t as i32);
            let bc2 = 1.0 - beta2.powi(slot.t as i32);
            let decay = lr * weight_decay;
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
            {
                *w -= decay * *w;
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
