//! SGD with momentum and Adam, with the framework-default constants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimKind::Sgd => "sgd",
            OptimKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimKind::Sgd),
            "adam" => Ok(OptimKind::Adam),
            other => Err(Error::invalid(format!("unknown optimiser `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimKind::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn new(kind: OptimKind, lr: f64) -> Self {
        match kind {
            OptimKind::Sgd => Self::sgd(lr),
            OptimKind::Adam => Self::adam(lr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("invalid Adam constants"));
        }
        Ok(())
    }
}

/// Moment buffers, zero-initialized on the first step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

pub struct Optimizer {
    cfg: OptimConfig,
    state: OptimState,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: OptimState::default(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn state(&self) -> &OptimState {
        &self.state
    }

    /// Applies one update. `grads` is aligned with `params.entries()`.
    ///
    /// SGD: `v ← μ·v + g; θ ← θ − lr·v`. Adam: bias-corrected first and
    /// second moments, `θ ← θ − lr·m̂/(√v̂ + ε)`.
    pub fn step(&mut self, params: &mut ParamVector, grads: &[&[f32]]) -> Result<()> {
        let entries = params.entries_mut();
        if grads.len() != entries.len() {
            return Err(Error::invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                entries.len()
            )));
        }
        for (e, g) in entries.iter().zip(grads) {
            if e.value.numel() != g.len() {
                return Err(Error::shape(
                    "optimizer",
                    format!("gradient of `{}` has {} values, expected {}", e.name, g.len(), e.value.numel()),
                ));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(e.name.clone()));
            }
        }
        let st = &mut self.state;
        if st.first.is_empty() {
            st.first = entries.iter().map(|e| vec![0.0; e.value.numel()]).collect();
            if self.cfg.kind == OptimKind::Adam {
                st.second = st.first.clone();
            }
        }
        st.step += 1;
        let lr = self.cfg.lr;
        match self.cfg.kind {
            OptimKind::Sgd => {
                let mu = self.cfg.momentum;
                for ((e, g), v) in entries.iter_mut().zip(grads).zip(&mut st.first) {
                    for ((p, &gi), vi) in e.value.data_mut().iter_mut().zip(*g).zip(v.iter_mut()) {
                        let nv = mu * *vi as f64 + gi as f64;
                        *vi = nv as f32;
                        *p = (*p as f64 - lr * nv) as f32;
                    }
                }
            }
            OptimKind::Adam => {
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let t = st.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((e, g), m), v) in entries.iter_mut().zip(grads).zip(&mut st.first).zip(&mut st.second) {
                    for (((p, &gi), mi), vi) in e
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(*g)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let gi = gi as f64;
                        let nm = b1 * *mi as f64 + (1.0 - b1) * gi;
                        let nv = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
                        *mi = nm as f32;
                        *vi = nv as f32;
                        let update = lr * (nm / c1) / ((nv / c2).sqrt() + eps);
                        *p = (*p as f64 - update) as f32;
                    }
                }
            }
        }
        Ok(())
    }
}
