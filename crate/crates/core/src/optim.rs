//! Adam with decoupled weight decay, and the linear warmup/decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear ramp `0 → base` over `[0, warmup]`, then linear decay `base → 0`
/// over `[warmup, total]`. With `warmup = 0` the schedule starts at `base`.
pub fn lr_schedule(step: u64, warmup: u64, total: u64, base: f64) -> Result<f64> {
    if step > total {
        return Err(Error::StepOutOfRange { step, total });
    }
    if warmup > total {
        return Err(Error::InvalidConfig(format!(
            "warmup {warmup} exceeds total steps {total}"
        )));
    }
    if step < warmup {
        return Ok(base * (step as f64 / warmup as f64));
    }
    if total == warmup {
        return Ok(base);
    }
    Ok(base * ((total - step) as f64 / (total - warmup) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize) -> Self {
        Self::with_weight_decay(num_params, 0.0)
    }

    pub fn with_weight_decay(num_params: usize, weight_decay: f64) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One bias-corrected Adam update in place. Weight decay is decoupled:
    /// `θ ← θ (1 − lr λ)` before the adaptive step.
    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        let n = self.first_moment.len();
        if params.len() != n || grads.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: if params.len() != n {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(k));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p = *p * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
