//! Adam with bias correction, and the step learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter moment estimates. Slot `i` belongs to the `i`-th parameter
/// of the store it was created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<f32>>,
    pub second: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(Error::config("train.lr", format!("must be > 0, got {}", config.lr)));
        }
        let zeros: Vec<_> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    /// One update at learning rate `lr`, using each parameter's accumulated
    /// gradient. Parameters without a gradient are treated as zero-gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config("train.lr", format!("must be > 0, got {lr}")));
        }
        if store.len() != self.first.len() {
            return Err(Error::Validation(format!(
                "optimizer holds {} slots for {} parameters",
                self.first.len(),
                store.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let eps = self.config.eps;
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = p.value.data_mut();
            match &p.grad {
                Some(g) => {
                    for (((w, m), v), &g) in w.iter_mut().zip(m).zip(v).zip(g.data()) {
                        let g = g as f64;
                        let mn = b1 * *m as f64 + (1.0 - b1) * g;
                        let vn = b2 * *v as f64 + (1.0 - b2) * g * g;
                        *m = mn as f32;
                        *v = vn as f32;
                        let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                        *w = (*w as f64 - update) as f32;
                    }
                }
                None => {
                    for ((w, m), v) in w.iter_mut().zip(m).zip(v) {
                        let mn = b1 * *m as f64;
                        let vn = b2 * *v as f64;
                        *m = mn as f32;
                        *v = vn as f32;
                        let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                        *w = (*w as f64 - update) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Multiply the base rate by `factor` every `every` epochs. Epochs are 1-based:
/// with base 1e-4, factor 0.1, every 50, epochs 1..=50 run at 1e-4 and
/// 51..=100 at 1e-5.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub factor: f64,
    /// `0` disables decay.
    pub every: usize,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.every == 0 || epoch == 0 {
            return self.base_lr;
        }
        let drops = (epoch - 1) / self.every;
        self.base_lr * self.factor.powi(drops as i32)
    }
}
