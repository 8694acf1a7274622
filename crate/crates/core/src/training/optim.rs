use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Cosine-annealed rate cycling from `lr_max` down to `lr_min` every
/// `cycle_length` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub cycle_length: usize,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, cycle_length: usize) -> Result<Self> {
        if cycle_length == 0 {
            return Err(Error::Config("cycle_length must be positive".into()));
        }
        if !(lr_min >= 0.0 && lr_max >= lr_min && lr_max.is_finite()) {
            return Err(Error::Config(format!("need 0 ≤ lr_min ≤ lr_max, got {lr_min} and {lr_max}")));
        }
        Ok(Self {
            lr_max,
            lr_min,
            cycle_length,
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let c = self.cycle_length as u64;
        let phase = (step % c) as f64 / c as f64;
        let lr = self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos());
        lr.clamp(self.lr_min, self.lr_max)
    }
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held a NaN or infinity; nothing changed.
    Skipped,
}

/// Moments and counters for AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub schedule: CosineSchedule,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
    /// Calls to [`OptimizerState::step`], applied or skipped.
    iterations: u64,
    /// Applied updates (drives bias correction).
    applied: u64,
    skipped: u64,
}

impl OptimizerState {
    pub fn new(params: &[Tensor2], config: AdamWConfig, schedule: CosineSchedule) -> Self {
        let zeros: Vec<Tensor2> = params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect();
        Self {
            config,
            schedule,
            m: zeros.clone(),
            v: zeros,
            iterations: 0,
            applied: 0,
            skipped: 0,
        }
    }

    pub fn iterations(&self) -> u64 {
        self.iterations
    }

    pub fn applied(&self) -> u64 {
        self.applied
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.iterations)
    }

    /// One update at the scheduled rate.
    pub fn step(&mut self, params: &mut [Tensor2], grads: &[Tensor2]) -> Result<StepOutcome> {
        let lr = self.current_lr();
        self.step_with_lr(params, grads, lr)
    }

    pub fn step_with_lr(&mut self, params: &mut [Tensor2], grads: &[Tensor2], lr: f64) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(
                "adamw_step",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::dim(
                    "adamw_step",
                    format!("param {:?}, grad {:?}, moment {:?}", p.shape(), g.shape(), m.shape()),
                ));
            }
        }
        self.iterations += 1;
        if grads.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient at iteration {}; step skipped", self.iterations);
            return Ok(StepOutcome::Skipped);
        }
        self.applied += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.applied as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pk, &gk), mk), vk) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let mhat = *mk / c1;
                let vhat = *vk / c2;
                *pk = *pk * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}
