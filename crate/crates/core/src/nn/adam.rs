use std::f64::consts::PI;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

/// Cosine interpolation of the learning rate from `start` (step 0) to `end`
/// (step `total_steps` and beyond). Either direction is allowed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn constant(rate: f64) -> Self {
        Self { start: rate, end: rate, total_steps: 1 }
    }

    pub fn rate(&self, step: u64) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.end;
        }
        let progress = step as f64 / self.total_steps as f64;
        self.end + (self.start - self.end) * 0.5 * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: CosineSchedule,
}

impl AdamConfig {
    pub fn new(schedule: CosineSchedule) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, schedule }
    }

    pub fn constant(rate: f64) -> Self {
        Self::new(CosineSchedule::constant(rate))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, len: usize) -> Result<Self> {
        let s = config.schedule;
        if !(s.start > 0.0 && s.end > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rates must be positive, got {} -> {}",
                s.start, s.end
            )));
        }
        Ok(Self { config, m: vec![0.0; len], v: vec![0.0; len], t: 0 })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn current_rate(&self) -> f64 {
        self.config.schedule.rate(self.t)
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension { expected: self.m.len(), got: grad.len() });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient entry {i} is {} at optimizer step {}",
                grad[i], self.t
            )));
        }
        let AdamConfig { beta1, beta2, eps, schedule } = self.config;
        let rate = schedule.rate(self.t);
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= rate * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }

    pub fn save(&self, prefix: &str, ckpt: &mut Checkpoint) {
        ckpt.push_vector(&format!("{prefix}.m"), self.m.clone());
        ckpt.push_vector(&format!("{prefix}.v"), self.v.clone());
        ckpt.push_scalar(&format!("{prefix}.t"), self.t as f64);
    }

    pub fn load(&mut self, prefix: &str, ckpt: &Checkpoint) -> Result<()> {
        let m = ckpt.vector(&format!("{prefix}.m"), self.m.len())?;
        let v = ckpt.vector(&format!("{prefix}.v"), self.v.len())?;
        self.m = m;
        self.v = v;
        self.t = ckpt.scalar(&format!("{prefix}.t"))? as u64;
        Ok(())
    }
}
