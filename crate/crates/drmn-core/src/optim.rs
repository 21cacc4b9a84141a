//! Adam with bias correction and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-parameter Adam state. Moments match the parameter shape.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update. Moves the parameter opposite the bias-corrected
/// gradient direction and increments the step counter.
pub fn adam_step(param: &mut Tensor, grad: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() {
        return Err(Error::Shape {
            op: "adam_step",
            detail: format!(
                "param {} entries, grad {}, state {}",
                param.len(),
                grad.len(),
                state.m.len()
            ),
        });
    }
    // lr = 0 is a legal no-op step (moments and the counter still advance);
    // negative rates are rejected.
    if lr < 0.0 {
        return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NumericDomain {
            op: "adam_step",
            detail: "non-finite gradient".into(),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let data = param.data_mut();
    for i in 0..grad.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        data[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Step-decay schedule: lr(e) = base * factor^floor(e / decay_every).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, decay_every: usize, decay_factor: f64) -> Result<Self> {
        if base_lr < 0.0 || decay_every == 0 || !(0.0..=1.0).contains(&decay_factor) || decay_factor == 0.0 {
            return Err(Error::Config(format!(
                "invalid schedule: base_lr {base_lr}, decay_every {decay_every}, factor {decay_factor}"
            )));
        }
        Ok(LrSchedule {
            base_lr,
            decay_every,
            decay_factor,
        })
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        self.base_lr * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}
