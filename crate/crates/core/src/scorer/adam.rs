//! Adam with bias correction, applied to the trainable slice of a parameter
//! vector, and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Learning rate when all parameters train.
pub const SCRATCH_LR: f64 = 1e-3;
/// Learning rate for partial fine-tuning.
pub const FINETUNE_LR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments for `n` trainable parameters.
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }
}

/// One Adam update of `theta[trainable[i]]` by `grad[i]`. Parameters not
/// listed in `trainable` are never touched.
pub fn adam_step(
    theta: &mut [f64],
    trainable: &[usize],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grad.len() != trainable.len() || state.m.len() != trainable.len() {
        return Err(Error::Shape(format!(
            "adam: {} gradients, {} trainable parameters, {} moments",
            grad.len(),
            trainable.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at trainable index {i}")));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for (k, (&idx, &g)) in trainable.iter().zip(grad).enumerate() {
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        theta[idx] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// `lr(epoch) = base_lr * decay ^ floor(epoch / interval)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay: f64,
    pub interval: usize,
}

impl LrSchedule {
    pub fn finetune() -> Self {
        LrSchedule {
            base_lr: FINETUNE_LR,
            decay: 0.95,
            interval: 2,
        }
    }

    pub fn scratch() -> Self {
        LrSchedule {
            base_lr: SCRATCH_LR,
            ..LrSchedule::finetune()
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay.powi((epoch / self.interval.max(1)) as i32)
    }
}
