// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamStore, Real, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam. Moment buffers exist only for trainable parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |p: &super::Param<T>| {
            if p.trainable {
                vec![T::zero(); p.value.len()]
            } else {
                Vec::new()
            }
        };
        Self {
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPS,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// One in-place update. Frozen parameters are never written.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>], lr: f64) -> Result<(), TensorError> {
        params.check_grads(grads)?;
        if self.m.len() != params.len() {
            return Err(TensorError::invalid(
                "adam",
                "optimizer state does not match parameters",
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_m_b1, one_m_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let c1 = T::lit(1.0 / (1.0 - self.beta1.powi(t)));
        let c2 = T::lit(1.0 / (1.0 - self.beta2.powi(t)));
        let (lr, eps) = (T::lit(lr), T::lit(self.epsilon));
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = grads[i].as_ref().expect("checked above");
            if self.m[i].len() != g.len() {
                return Err(TensorError::invalid("adam", format!("no moment buffer for {}", p.name)));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let mh = *m * c1;
                let vh = *v * c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("step {step} beyond total_steps {total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    Invalid(String),
}

/// Cosine one-cycle learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
    pub start_div: f64,
    pub final_div: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: u64) -> Result<Self, ScheduleError> {
        let s = Self {
            max_lr,
            total_steps,
            warmup_fraction: 0.3,
            start_div: 25.0,
            final_div: 1e4,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        if !(self.max_lr > 0.0 && self.max_lr.is_finite()) {
            return Err(ScheduleError::Invalid(format!("max_lr {}", self.max_lr)));
        }
        if self.total_steps == 0 {
            return Err(ScheduleError::Invalid("total_steps must be >= 1".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(ScheduleError::Invalid(format!(
                "warmup_fraction {}",
                self.warmup_fraction
            )));
        }
        if !(self.start_div > 1.0 && self.final_div > 1.0) {
            return Err(ScheduleError::Invalid("divisors must exceed 1".into()));
        }
        Ok(())
    }

    /// Last step of the warm-up phase, where the rate peaks.
    pub fn warmup_steps(&self) -> u64 {
        let w = (self.warmup_fraction * self.total_steps as f64).round() as u64;
        w.clamp(1, self.total_steps.saturating_sub(1).max(1))
    }

    pub fn lr_at(&self, step: u64) -> Result<f64, ScheduleError> {
        if step > self.total_steps {
            return Err(ScheduleError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let start = self.max_lr / self.start_div;
        let end = self.max_lr / self.final_div;
        let w = self.warmup_steps();
        let cos = |from: f64, to: f64, pct: f64| to + (from - to) * 0.5 * (1.0 + (std::f64::consts::PI * pct).cos());
        Ok(if step <= w {
            cos(start, self.max_lr, step as f64 / w as f64)
        } else {
            cos(self.max_lr, end, (step - w) as f64 / (self.total_steps - w) as f64)
        })
    }
}
