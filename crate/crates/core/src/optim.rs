//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, ParamSet};
use crate::error::{ensure, Result};

pub const DEFAULT_LR: f64 = 1e-4;

/// Learning rate as a function of the step index within a phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `peak * (1 + cos(pi * (offset + s) / total)) / 2`. `offset` lets
    /// several phases share one continuous curve.
    Cosine {
        peak: f64,
        offset: usize,
        total: usize,
    },
}

impl LrSchedule {
    pub fn cosine(peak: f64, total: usize) -> Self {
        LrSchedule::Cosine {
            peak,
            offset: 0,
            total,
        }
    }

    pub fn peak(&self) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine { peak, .. } => peak,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant { lr } => lr,
            LrSchedule::Cosine {
                peak,
                offset,
                total,
            } => {
                let p = ((offset + step) as f64 / total.max(1) as f64).min(1.0);
                0.5 * peak * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.peak().is_finite() && self.peak() > 0.0,
            Param,
            "learning rate must be positive, got {}",
            self.peak()
        );
        if let LrSchedule::Cosine { total, .. } = self {
            ensure!(*total > 0, Param, "cosine schedule needs a positive length");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction; weight decay, when set, is decoupled.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    m: Gradients,
    v: Gradients,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        ensure!(
            grads.len() == params.len(),
            Shape,
            "gradient count {} does not match parameter count {}",
            grads.len(),
            params.len()
        );
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.data[i] -= lr * (update + weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Plain SGD with heavy-ball momentum.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Gradients,
}

impl Sgd {
    pub fn new(params: &ParamSet, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<()> {
        ensure!(
            grads.len() == params.len(),
            Shape,
            "gradient count mismatch"
        );
        for ((p, g), vel) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
        {
            for i in 0..p.data.len() {
                vel[i] = self.momentum * vel[i] + g[i];
                p.data[i] -= lr * vel[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::cosine(1e-4, 2000);
        assert_eq!(s.lr(0), 1e-4);
        assert!(s.lr(2000) <= 1e-9);
        assert!((s.lr(1000) - 5e-5).abs() < 1e-18);
        let tail = LrSchedule::Cosine {
            peak: 1e-4,
            offset: 1000,
            total: 2000,
        };
        assert_eq!(tail.lr(0), s.lr(1000));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut ps = ParamSet::new();
        ps.push("w", vec![3], vec![1.0, -2.0, 0.0]);
        let mut opt = Adam::new(&ps, AdamConfig::default());
        opt.step(&mut ps, &vec![vec![0.5, -3.0, 0.0]], 0.1).unwrap();
        let d = &ps.tensors()[0].data;
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] + 1.9).abs() < 1e-6);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        ps.push("w", vec![2], vec![3.0, -4.0]);
        let mut opt = Adam::new(&ps, AdamConfig::default());
        for _ in 0..2000 {
            let g = vec![ps.tensors()[0].data.iter().map(|w| 2.0 * w).collect()];
            opt.step(&mut ps, &g, 0.01).unwrap();
        }
        assert!(ps.tensors()[0].data.iter().all(|w| w.abs() < 1e-2));
    }
}
