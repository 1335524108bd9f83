//! Momentum SGD and the learning-rate schedule used by the trainer.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Heavy-ball SGD: `v <- mu v + g + wd w`, `w <- w - lr v`.
#[derive(Debug)]
pub struct MomentumSgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    cfg: SgdConfig,
}

impl Optimizer for MomentumSgd {
    type Config = SgdConfig;

    fn new(vars: Vec<Var>, cfg: SgdConfig) -> candle_core::Result<Self> {
        let velocity = vec![None; vars.len()];
        Ok(Self { vars, velocity, cfg })
    }

    fn step(&mut self, grads: &GradStore) -> candle_core::Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let mut g = g.detach();
            if self.cfg.weight_decay != 0.0 {
                g = (g + (var.as_tensor() * self.cfg.weight_decay)?)?;
            }
            let v = match vel.take() {
                Some(prev) => ((prev * self.cfg.momentum)? + g)?.detach(),
                None => g,
            };
            var.set(&(var.as_tensor() - (&v * self.cfg.lr)?)?)?;
            *vel = Some(v);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.cfg.lr
    }

    fn set_learning_rate(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }
}

/// Linear warm-up followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Either optimiser behind one interface.
pub enum TrainOptimizer {
    Sgd(MomentumSgd),
    AdamW(AdamW),
}

impl TrainOptimizer {
    pub fn new(kind: OptimizerKind, vars: Vec<Var>, cfg: SgdConfig) -> Result<Self> {
        Ok(match kind {
            OptimizerKind::Sgd => Self::Sgd(MomentumSgd::new(vars, cfg)?),
            OptimizerKind::AdamW => Self::AdamW(AdamW::new(
                vars,
                ParamsAdamW {
                    lr: cfg.lr,
                    weight_decay: cfg.weight_decay,
                    ..Default::default()
                },
            )?),
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        match self {
            Self::Sgd(o) => o.set_learning_rate(lr),
            Self::AdamW(o) => o.set_learning_rate(lr),
        }
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        match self {
            Self::Sgd(o) => o.step(grads)?,
            Self::AdamW(o) => o.step(grads)?,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn momentum_accumulates() {
        let w = Var::new(&[1.0f64], &Device::Cpu).unwrap();
        let cfg = SgdConfig {
            lr: 0.1,
            momentum: 0.5,
            weight_decay: 0.0,
        };
        let mut opt = MomentumSgd::new(vec![w.clone()], cfg).unwrap();
        for _ in 0..2 {
            // d/dw (2w) = 2
            let loss = (w.as_tensor() * 2.0).unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        // steps of 0.2 then 0.1 * (0.5 * 2 + 2) = 0.3
        let v = w.as_tensor().to_vec1::<f64>().unwrap()[0];
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule {
            base_lr: 1.0,
            warmup_steps: 2,
            total_steps: 12,
        };
        assert_eq!((s.lr(0), s.lr(1), s.lr(2)), (0.5, 1.0, 1.0));
        assert!((s.lr(7) - 0.5).abs() < 1e-12);
        assert!(s.lr(12).abs() < 1e-12);
    }
}
