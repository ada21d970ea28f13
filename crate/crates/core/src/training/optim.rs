use serde::{Deserialize, Serialize};

use crate::nn::{ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    #[default]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub adam_lr: f64,
    pub sgd_lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            adam_lr: 1e-5,
            sgd_lr0: 0.01,
            momentum: 0.99,
            weight_decay: 0.0005,
            poly_power: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam_lr > 0.0 && self.sgd_lr0 > 0.0) {
            return Err(Error::Config("learning rates must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.poly_power >= 0.0) {
            return Err(Error::Config("poly_power must be >= 0".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolySchedule {
    pub lr0: f64,
    pub power: f64,
    pub total_iters: usize,
}

/// `lr0 * (1 - iter / total)^power`, zero past the end.
pub fn poly_lr(sched: &PolySchedule, iter: usize) -> f64 {
    let total = sched.total_iters.max(1);
    if iter > total {
        log::warn!("poly schedule queried at iteration {iter} beyond total {total}; using 0");
        return 0.0;
    }
    sched.lr0 * (1.0 - iter as f64 / total as f64).powf(sched.power)
}

fn check_finite(grads: &[f64]) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at index {i}: {}", grads[i])));
    }
    Ok(())
}

fn check_lengths(a: usize, rest: &[usize]) -> Result<()> {
    if rest.iter().any(|&n| n != a) {
        return Err(Error::Shape(format!("optimizer buffers disagree in length: {a} vs {rest:?}")));
    }
    Ok(())
}

/// `v <- m v + (g + wd p); p <- p - lr v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, cfg: &OptimizerConfig) -> Result<()> {
    check_lengths(params.len(), &[grads.len(), velocity.len()])?;
    check_finite(grads)?;
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + (g + cfg.weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Adam with L2 weight decay folded into the gradient; `t` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: &OptimizerConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::Invalid("adam step counter starts at 1".into()));
    }
    check_lengths(params.len(), &[grads.len(), m.len(), v.len()])?;
    check_finite(grads)?;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g + cfg.weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Per-parameter optimizer buffers.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd { velocity: Vec<Tensor> },
    Adam { m: Vec<Tensor>, v: Vec<Tensor>, t: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        match kind {
            OptimizerKind::Sgd => Self::Sgd { velocity: zeros() },
            OptimizerKind::Adam => Self::Adam { m: zeros(), v: zeros(), t: 0 },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Sgd { .. } => OptimizerKind::Sgd,
            Self::Adam { .. } => OptimizerKind::Adam,
        }
    }

    /// Applies one update with already-averaged gradients.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64, cfg: &OptimizerConfig) -> Result<()> {
        for (i, g) in grads.iter().enumerate() {
            check_finite(g.data()).map_err(|e| {
                Error::Numerical(format!("{e} in parameter {}", params.iter().nth(i).map(|(n, _)| n).unwrap_or("?")))
            })?;
        }
        match self {
            Self::Sgd { velocity } => {
                for ((p, g), v) in params.tensors_mut().iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    sgd_step(p.data_mut(), g.data(), v.data_mut(), lr, cfg)?;
                }
            }
            Self::Adam { m, v, t } => {
                *t += 1;
                for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    adam_step(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), lr, cfg, *t)?;
                }
            }
        }
        Ok(())
    }

    /// Named tensors for checkpointing, keyed by parameter names.
    pub fn to_named(&self, params: &ParamStore, prefix: &str) -> Vec<(String, Tensor)> {
        let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
        let mut out = Vec::new();
        match self {
            Self::Sgd { velocity } => {
                for (n, t) in names.iter().zip(velocity) {
                    out.push((format!("{prefix}velocity.{n}"), t.clone()));
                }
            }
            Self::Adam { m, v, t } => {
                for (n, x) in names.iter().zip(m) {
                    out.push((format!("{prefix}m.{n}"), x.clone()));
                }
                for (n, x) in names.iter().zip(v) {
                    out.push((format!("{prefix}v.{n}"), x.clone()));
                }
                out.push((format!("{prefix}t"), Tensor::scalar(*t as f64)));
            }
        }
        out
    }

    pub fn from_named(kind: OptimizerKind, params: &ParamStore, prefix: &str, tensors: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("optimizer tensor {name} missing")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!("optimizer tensor {name} has shape {:?}", t.shape())));
            }
            Ok(t)
        };
        let collect = |tag: &str| -> Result<Vec<Tensor>> {
            params.iter().map(|(n, p)| find(format!("{prefix}{tag}.{n}"), p.shape())).collect()
        };
        Ok(match kind {
            OptimizerKind::Sgd => Self::Sgd { velocity: collect("velocity")? },
            OptimizerKind::Adam => {
                let t = find(format!("{prefix}t"), &[1])?.data()[0] as u64;
                Self::Adam { m: collect("m")?, v: collect("v")?, t }
            }
        })
    }
}
