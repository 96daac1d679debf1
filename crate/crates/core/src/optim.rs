//! SGD with momentum, Adam, and learning-rate schedules.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        Self::Sgd { momentum }
    }

    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgd { .. } => "sgd",
            Self::Adam { .. } => "adam",
        }
    }
}

/// Per-parameter state plus the step counter.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Self {
            kind,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update with learning rate `lr`. Weight decay is added to the
    /// gradient (L2), so parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.first.resize(store.len(), None);
        self.second.resize(store.len(), None);
        self.steps += 1;
        let t = self.steps as i32;
        let wd = self.weight_decay;
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let theta = store.get_mut(id);
            if g.shape() != theta.shape() {
                return Err(Error::shape("optimizer_step", theta.shape(), g.shape()));
            }
            let n = theta.numel();
            let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for j in 0..n {
                        let gj = g.data()[j] + wd * theta.data()[j];
                        let v = if t == 1 { gj } else { momentum * m.data()[j] + gj };
                        m.data_mut()[j] = v;
                        theta.data_mut()[j] -= lr * v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for j in 0..n {
                        let gj = g.data()[j] + wd * theta.data()[j];
                        let mj = beta1 * m.data()[j] + (1.0 - beta1) * gj;
                        let vj = beta2 * v.data()[j] + (1.0 - beta2) * gj * gj;
                        m.data_mut()[j] = mj;
                        v.data_mut()[j] = vj;
                        theta.data_mut()[j] -= lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
    Poly,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            "poly" => Ok(Self::Poly),
            _ => Err(Error::Config(format!("unknown schedule `{s}` (constant|cosine|poly)"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
            Self::Poly => "poly",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub min_lr: f64,
    pub total: usize,
}

pub const POLY_POWER: f64 = 0.9;

impl Schedule {
    /// Learning rate at step `t` of `total`; `t` past the end is clamped.
    pub fn lr(&self, t: usize) -> f64 {
        let frac = if self.total == 0 {
            1.0
        } else {
            t.min(self.total) as f64 / self.total as f64
        };
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                self.min_lr + (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0
            }
            ScheduleKind::Poly => self.base_lr * (1.0 - frac).powf(POLY_POWER),
        }
    }
}
