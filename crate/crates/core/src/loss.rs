//! Gaussian negative log-likelihood and the squared/absolute error baselines.
//!
//! Within a sample the losses sum (NLE) or average (MSE, MAE) over every
//! step and target; across a batch they are averaged over samples.

use std::fmt;
use std::str::FromStr;

use duq_diff::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Nle,
    Mse,
    Mae,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nle" => Ok(LossKind::Nle),
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected nle, mse or mae)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Nle => "nle",
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
        })
    }
}

/// Loss of one sample with its per-cell terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub cells: Vec<f64>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `sum log(s2)/2 + (y - u)^2 / (2 s2)`, the constant dropped.
pub fn nle(mean: &Tensor, variance: &Tensor, y: &Tensor) -> Result<LossValue> {
    same_shape(mean, variance, "mean and variance")?;
    same_shape(mean, y, "mean and target")?;
    if let Some(v) = variance.data().iter().find(|v| !(**v > 0.0)) {
        return Err(Error::Degenerate(format!("variance must be positive, got {v}")));
    }
    let cells: Vec<f64> = mean
        .data()
        .iter()
        .zip(variance.data())
        .zip(y.data())
        .map(|((u, s2), y)| s2.ln() / 2.0 + (y - u).powi(2) / (2.0 * s2))
        .collect();
    Ok(LossValue {
        value: cells.iter().sum(),
        cells,
    })
}

fn residual_mean(mean: &Tensor, y: &Tensor, f: impl Fn(f64) -> f64) -> Result<LossValue> {
    same_shape(mean, y, "mean and target")?;
    let cells: Vec<f64> = mean.data().iter().zip(y.data()).map(|(u, y)| f(y - u)).collect();
    let value = if cells.is_empty() {
        0.0
    } else {
        cells.iter().sum::<f64>() / cells.len() as f64
    };
    Ok(LossValue { value, cells })
}

pub fn mse(mean: &Tensor, y: &Tensor) -> Result<LossValue> {
    residual_mean(mean, y, |r| r * r)
}

pub fn mae(mean: &Tensor, y: &Tensor) -> Result<LossValue> {
    residual_mean(mean, y, f64::abs)
}

impl LossKind {
    /// Loss of a single sample.
    pub fn sample_loss(self, mean: &Tensor, variance: &Tensor, y: &Tensor) -> Result<f64> {
        Ok(match self {
            LossKind::Nle => nle(mean, variance, y)?.value,
            LossKind::Mse => mse(mean, y)?.value,
            LossKind::Mae => mae(mean, y)?.value,
        })
    }

    /// Batch loss on a tape; inputs are `(B, cells)` with one row per sample.
    pub fn on_tape(self, tape: &mut Tape, mean: Var, variance: Var, y: Var) -> Result<Var> {
        let rows = tape.value(mean).shape().first().copied().unwrap_or(1).max(1);
        let diff = tape.sub(y, mean)?;
        Ok(match self {
            LossKind::Nle => {
                let log_var = tape.log(variance)?;
                let half_log = tape.affine(log_var, 0.5, 0.0)?;
                let sq = tape.square(diff)?;
                let two_var = tape.affine(variance, 2.0, 0.0)?;
                let fit = tape.div(sq, two_var)?;
                let cells = tape.add(half_log, fit)?;
                let total = tape.sum(cells)?;
                tape.affine(total, 1.0 / rows as f64, 0.0)?
            }
            LossKind::Mse => {
                let sq = tape.square(diff)?;
                tape.mean(sq)?
            }
            LossKind::Mae => {
                let abs = tape.abs(diff)?;
                tape.mean(abs)?
            }
        })
    }
}
