//! First-order optimizers, written out explicitly: ADAM for trajectory
//! control points and rectified ADAM for denoiser parameters.
//!
//! Both keep per-element first and second moment accumulators with bias
//! correction. Rectified ADAM additionally estimates whether the
//! second-moment variance is tractable (`rho_t > 4`) and falls back to
//! bias-corrected momentum SGD in the early steps where it is not.
//!
//! Steps mutate parameters in place; a non-finite gradient aborts the step
//! with an error before any state changes.

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Constant learning rate used for both parameter blocks.
pub const DEFAULT_LR: f64 = 1e-3;

/// Moment accumulators for one parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl OptimState {
    pub fn new(len: usize, lr: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive and finite, got {lr}"
            )));
        }
        Ok(Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        })
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    fn check(&self, params: &[f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer state holds {} elements, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient passed to optimizer".into()));
        }
        Ok(())
    }

    fn update_moments(&mut self, grads: &[f64]) {
        self.t += 1;
        for i in 0..self.m.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
        }
    }
}

/// One ADAM update with bias correction.
pub fn adam_step(state: &mut OptimState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.check(params, grads)?;
    state.update_moments(grads);
    let t = state.t as i32;
    let mc = 1.0 - ADAM_BETA1.powi(t);
    let vc = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        let m_hat = state.m[i] / mc;
        let v_hat = state.v[i] / vc;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Variance-rectification factor; `None` while the variance estimate is
/// intractable (`rho_t <= 4`).
fn rectification(t: u64) -> Option<f64> {
    let rho_inf = 2.0 / (1.0 - ADAM_BETA2) - 1.0;
    let b2t = ADAM_BETA2.powi(t as i32);
    let rho_t = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
    if rho_t <= 4.0 {
        return None;
    }
    Some(
        ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            .sqrt(),
    )
}

/// One rectified-ADAM update: rectified adaptive step when `rho_t > 4`,
/// bias-corrected momentum SGD otherwise.
pub fn radam_step(state: &mut OptimState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    state.check(params, grads)?;
    state.update_moments(grads);
    let t = state.t as i32;
    let mc = 1.0 - ADAM_BETA1.powi(t);
    match rectification(state.t) {
        Some(r) => {
            let vc = 1.0 - ADAM_BETA2.powi(t);
            for i in 0..params.len() {
                let m_hat = state.m[i] / mc;
                let v_hat = state.v[i] / vc;
                params[i] -= state.lr * r * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        None => {
            for i in 0..params.len() {
                params[i] -= state.lr * state.m[i] / mc;
            }
        }
    }
    Ok(())
}
