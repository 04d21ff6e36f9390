use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Adam,
    Sgd,
}

/// Learning-rate schedule and update rule.
///
/// The schedule ramps linearly over `warmup_steps`, holds `base_lr`, and
/// from `anneal_point · total_steps` follows a half cosine down to `min_lr`,
/// reached exactly at `total_steps`. `total_steps == 0` disables annealing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub anneal_point: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            kind: OptimKind::Adam,
            base_lr: 1e-3,
            warmup_steps: 1000,
            total_steps: 0,
            anneal_point: 0.72,
            min_lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    /// Effective learning rate at a 1-based step index.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let step = step.max(1);
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let start = (self.anneal_point * self.total_steps as f64).max(self.warmup_steps as f64);
        let s = step as f64;
        if s <= start {
            return self.base_lr;
        }
        let span = self.total_steps as f64 - start;
        if span <= 0.0 || s >= self.total_steps as f64 {
            return self.min_lr;
        }
        let progress = (s - start) / span;
        self.min_lr
            + (self.base_lr - self.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub config: OptimConfig,
    moments: Vec<Moments>,
}

impl Optimizer {
    pub fn new(config: OptimConfig) -> Self {
        Optimizer {
            config,
            moments: Vec::new(),
        }
    }

    pub fn with_moments(config: OptimConfig, moments: Vec<Moments>) -> Self {
        Optimizer { config, moments }
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    /// Applies one update at the 1-based `step` and zeroes the gradients.
    /// Returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut Tensor], step: usize) -> Result<f64> {
        if let Some(bad) = params.iter().position(|p| !p.requires_grad()) {
            return Err(Error::Contract(format!(
                "optimizer step: parameter {bad} has no gradient"
            )));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| Moments {
                    m: vec![0.0; p.numel()],
                    v: vec![0.0; p.numel()],
                })
                .collect();
        }
        if self.moments.len() != params.len()
            || self
                .moments
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.m.len() != p.numel())
        {
            return Err(Error::Contract(
                "optimizer state does not match parameter set".into(),
            ));
        }
        let lr = self.config.learning_rate(step);
        let cfg = self.config;
        let t = step.max(1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (p, mom) in params.iter_mut().zip(self.moments.iter_mut()) {
            let (data, grad) = p.data_and_grad_mut();
            let grad = grad.expect("checked above");
            match cfg.kind {
                OptimKind::Sgd => {
                    for (w, g) in data.iter_mut().zip(grad.iter()) {
                        *w -= lr * g;
                    }
                }
                OptimKind::Adam => {
                    for i in 0..data.len() {
                        let g = grad[i];
                        mom.m[i] = cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g;
                        mom.v[i] = cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * g * g;
                        let mhat = mom.m[i] / bc1;
                        let vhat = mom.v[i] / bc2;
                        data[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
                    }
                }
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_warmup_step_is_linear_ramp() {
        let cfg = OptimConfig {
            base_lr: 1e-3,
            warmup_steps: 1000,
            ..Default::default()
        };
        assert!((cfg.learning_rate(1) - 1e-6).abs() < 1e-18);
        assert!((cfg.learning_rate(1000) - 1e-3).abs() < 1e-18);
    }

    #[test]
    fn cosine_reaches_min_at_endpoint() {
        let cfg = OptimConfig {
            base_lr: 1e-3,
            warmup_steps: 10,
            total_steps: 1000,
            anneal_point: 0.72,
            ..Default::default()
        };
        assert_eq!(cfg.learning_rate(1000), 0.0);
        assert_eq!(cfg.learning_rate(720), 1e-3);
        let mid = cfg.learning_rate(860);
        assert!((mid - 0.5e-3).abs() < 1e-12, "{mid}");
        // monotone non-increasing through the anneal phase
        let mut prev = f64::INFINITY;
        for s in 720..=1000 {
            let lr = cfg.learning_rate(s);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn sgd_identity_step() {
        let cfg = OptimConfig {
            kind: OptimKind::Sgd,
            base_lr: 0.1,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut w = Tensor::param(vec![1], vec![1.0]).unwrap();
        w.grad_mut().unwrap()[0] = 1.0;
        let mut opt = Optimizer::new(cfg);
        opt.step(&mut [&mut w], 1).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-15);
        assert_eq!(w.grad().unwrap(), &[0.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = OptimConfig {
            base_lr: 0.01,
            warmup_steps: 0,
            ..Default::default()
        };
        let mut w = Tensor::param(vec![2], vec![1.0, -1.0]).unwrap();
        w.grad_mut().unwrap().copy_from_slice(&[3.0, -0.5]);
        let mut opt = Optimizer::new(cfg);
        opt.step(&mut [&mut w], 1).unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((w.data()[0] - 0.99).abs() < 1e-8);
        assert!((w.data()[1] + 0.99).abs() < 1e-8);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut opt = Optimizer::new(OptimConfig::default());
        assert!(matches!(opt.step(&mut [&mut w], 1), Err(Error::Contract(_))));
    }
}
