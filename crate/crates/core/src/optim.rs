//! Mask-aware first-order optimizers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelGrads, ParamMut, SeqModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidArgument(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            ))),
        }
    }
}

/// Adam moments for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// One entry per tensor, in [`SeqModel::params_mut`] order. Empty for SGD.
    pub moments: Vec<Moments>,
}

impl Optimizer {
    pub fn sgd() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn adam() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }

    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::sgd(),
            OptimizerKind::Adam => Self::adam(),
        }
    }

    /// Applies one update to every parameter of `model`.
    pub fn step(&mut self, model: &mut SeqModel, grads: &ModelGrads, lr: f64) -> Result<()> {
        let params = model.params_mut();
        let grads = grads.flat();
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter tensors but {} gradient tensors",
                params.len(),
                grads.len()
            )));
        }
        match self.kind {
            OptimizerKind::Sgd => {
                self.t += 1;
                for (p, g) in params.into_iter().zip(grads) {
                    sgd_update(p, g, lr)?;
                }
            }
            OptimizerKind::Adam => {
                if self.moments.is_empty() {
                    self.moments = params
                        .iter()
                        .map(|p| Moments {
                            m: vec![0.0; p.values.len()],
                            v: vec![0.0; p.values.len()],
                        })
                        .collect();
                }
                if self.moments.len() != params.len() {
                    return Err(Error::InvalidArgument("optimizer state does not match the model".into()));
                }
                self.t += 1;
                let (b1, b2, eps, t) = (self.beta1, self.beta2, self.eps, self.t);
                for ((p, g), mo) in params.into_iter().zip(grads).zip(&mut self.moments) {
                    adam_update(p, g, lr, mo, b1, b2, eps, t)?;
                }
            }
        }
        Ok(())
    }
}

fn check_len(p: &ParamMut<'_>, g: &[f64]) -> Result<()> {
    if p.values.len() != g.len() {
        return Err(Error::shape("optimizer update", (p.values.len(), 1), (g.len(), 1)));
    }
    Ok(())
}

fn active(mask: Option<&[f64]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i] != 0.0)
}

/// `w ← w − lr·g`, skipping masked positions.
pub fn sgd_update(p: ParamMut<'_>, g: &[f64], lr: f64) -> Result<()> {
    check_len(&p, g)?;
    for (i, (w, gi)) in p.values.iter_mut().zip(g).enumerate() {
        if active(p.mask, i) {
            *w -= lr * gi;
        }
    }
    Ok(())
}

/// Bias-corrected Adam step number `t` (1-based). Masked positions are
/// left untouched and their moments cleared, so a weight revived by a later
/// mask starts from fresh statistics.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    p: ParamMut<'_>,
    g: &[f64],
    lr: f64,
    state: &mut Moments,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) -> Result<()> {
    check_len(&p, g)?;
    if state.m.len() != g.len() || state.v.len() != g.len() {
        return Err(Error::shape("adam moments", (state.m.len(), 1), (g.len(), 1)));
    }
    if t == 0 {
        return Err(Error::InvalidArgument("adam step counter starts at 1".into()));
    }
    let c1 = 1.0 - beta1.powi(t as i32);
    let c2 = 1.0 - beta2.powi(t as i32);
    for i in 0..g.len() {
        if !active(p.mask, i) {
            state.m[i] = 0.0;
            state.v[i] = 0.0;
            continue;
        }
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        p.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
