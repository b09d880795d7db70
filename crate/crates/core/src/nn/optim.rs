use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use super::params::{GradMap, ParamSet};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    PlainSgd,
    MomentumSgd,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::PlainSgd => "plain-sgd",
            OptimizerKind::MomentumSgd => "momentum-sgd",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "plain-sgd" | "sgd" => Ok(OptimizerKind::PlainSgd),
            "momentum-sgd" | "momentum" => Ok(OptimizerKind::MomentumSgd),
            other => Err(Error::InvalidArgument(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// SGD with optional momentum and weight decay.
///
/// One step is `v <- mu*v + grad` followed by `param -= lr * (v + wd*param)`,
/// with the decay term only on parameters flagged for it. Plain SGD keeps no
/// velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be nonnegative, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1) and weight decay nonnegative, got {momentum} and {weight_decay}"
            )));
        }
        Ok(Self {
            kind,
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn plain(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::PlainSgd, lr, 0.0, 0.0)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be nonnegative, got {lr}"
            )));
        }
        self.lr = lr;
        Ok(())
    }
}

/// Applies one optimizer step in place.
pub fn sgd_step(params: &mut ParamSet, grads: &GradMap, opt: &mut OptimizerState) -> Result<()> {
    for i in 0..params.len() {
        let g = grads
            .get(i)
            .ok_or_else(|| Error::MissingGradient(params.names()[i].clone()))?;
        if g.shape() != params.values()[i].shape() {
            return Err(Error::shape(
                "sgd-step",
                format!(
                    "gradient {:?} for `{}` {:?}",
                    g.shape(),
                    params.names()[i],
                    params.values()[i].shape()
                ),
            ));
        }
    }
    let momentum = opt.kind == OptimizerKind::MomentumSgd;
    if momentum && opt.velocity.len() != params.len() {
        opt.velocity = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    }
    for i in 0..params.len() {
        let grad = grads.get(i).expect("checked").data();
        let wd = if params.decays(i) { opt.weight_decay } else { 0.0 };
        let lr = opt.lr;
        let p = params.values_mut()[i].data_mut();
        if momentum {
            let v = opt.velocity[i].data_mut();
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(grad) {
                *v = opt.momentum * *v + g;
                *p -= lr * (*v + wd * *p);
            }
        } else {
            for (p, &g) in p.iter_mut().zip(grad) {
                *p -= lr * (g + wd * *p);
            }
        }
    }
    Ok(())
}

/// Differentiable plain-SGD step `theta - alpha * d(loss)/d(theta)` recorded on `g`.
/// The tape is retained so the result can be differentiated again.
pub fn virtual_sgd_step(g: &mut Graph, params: &[Var], loss: Var, alpha: f64) -> Result<Vec<Var>> {
    let grads = g.backward(loss, params, true)?;
    params
        .iter()
        .zip(grads)
        .map(|(&p, d)| {
            let step = g.scalar_mul(d, alpha);
            g.sub(p, step)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    /// Halves `base` every `period` epochs.
    StepHalving {
        base: f64,
        period: usize,
    },
    /// Cosine annealing from `base` towards zero over `horizon` epochs.
    Cosine {
        base: f64,
        horizon: usize,
    },
    Constant {
        base: f64,
    },
}

const MIN_LR: f64 = 1e-8;

impl LrSchedule {
    pub fn base(&self) -> f64 {
        match *self {
            LrSchedule::StepHalving { base, .. } | LrSchedule::Cosine { base, .. } | LrSchedule::Constant { base } => {
                base
            }
        }
    }
}

impl fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrSchedule::StepHalving { period, .. } => write!(f, "step-halving({period})"),
            LrSchedule::Cosine { horizon, .. } => write!(f, "cosine({horizon})"),
            LrSchedule::Constant { .. } => f.write_str("constant"),
        }
    }
}

/// Learning rate for `epoch` (zero-based). Never below 1e-8.
pub fn schedule_lr(sched: &LrSchedule, epoch: usize) -> f64 {
    let lr = match *sched {
        LrSchedule::StepHalving { base, period } => {
            let halvings = epoch / period.max(1);
            base * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
        }
        LrSchedule::Cosine { base, horizon } => {
            let t = epoch.min(horizon) as f64 / horizon.max(1) as f64;
            base * 0.5 * (1.0 + (PI * t).cos())
        }
        LrSchedule::Constant { base } => base,
    };
    lr.max(MIN_LR).min(sched.base())
}
