//! Per-stratum losses `l_k(theta)` and their gradients.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples belonging to one stratum. Rows of `features` are samples.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumData {
    features: DMatrix<f64>,
    targets: DVector<f64>,
}

impl StratumData {
    pub fn new(features: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        Ok(StratumData { features, targets })
    }

    /// A zero-sample stratum with parameter dimension `dim`.
    pub fn empty(dim: usize) -> Self {
        StratumData {
            features: DMatrix::zeros(0, dim),
            targets: DVector::zeros(0),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: &[f64], dim: usize) -> Result<Self> {
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Dimension(format!(
                "sample {bad} has {} features, expected {dim}",
                rows[bad].len()
            )));
        }
        let features = DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]);
        StratumData::new(features, DVector::from_column_slice(targets))
    }

    pub fn count(&self) -> usize {
        self.targets.len()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    /// Concatenates several strata into one pooled stratum.
    pub fn pooled<'a>(parts: impl IntoIterator<Item = &'a StratumData>, dim: usize) -> Self {
        let parts: Vec<&StratumData> = parts.into_iter().collect();
        let total: usize = parts.iter().map(|p| p.count()).sum();
        let mut features = DMatrix::zeros(total, dim);
        let mut targets = DVector::zeros(total);
        let mut row = 0;
        for p in parts {
            for i in 0..p.count() {
                features.row_mut(row).copy_from(&p.features.row(i));
                targets[row] = p.targets[i];
                row += 1;
            }
        }
        StratumData { features, targets }
    }
}

/// Loss family shared by all strata of a problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossSpec {
    LeastSquares,
    /// Labels in `{-1, +1}`.
    Logistic,
    /// Single logit parameter, labels in `{0, 1}`, features the constant 1.
    BernoulliLogit,
    /// Huberized pinball loss at quantile `tau` with smoothing width `kappa`.
    PinballHuber {
        tau: f64,
        #[serde(default = "default_kappa")]
        kappa: f64,
    },
}

fn default_kappa() -> f64 {
    0.05
}

impl LossSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::LeastSquares => "least_squares",
            LossSpec::Logistic => "logistic",
            LossSpec::BernoulliLogit => "bernoulli_logit",
            LossSpec::PinballHuber { .. } => "pinball_huber",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossSpec::PinballHuber { tau, kappa } = *self {
            if !(tau > 0.0 && tau < 1.0) {
                return Err(Error::InvalidParameter(format!("tau must lie in (0, 1), got {tau}")));
            }
            if !(kappa > 0.0) {
                return Err(Error::InvalidParameter(format!("kappa must be positive, got {kappa}")));
            }
        }
        Ok(())
    }
}

/// Numerically stable `log(1 + exp(z))`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Exact pinball (check) loss.
pub fn pinball(tau: f64, residual: f64) -> f64 {
    (1.0 - tau) * (-residual).max(0.0) + tau * residual.max(0.0)
}

/// Huberized pinball: asymmetric weight times a Huber function of width
/// `kappa`. Within `kappa / 2` of the exact pinball loss everywhere.
pub fn pinball_huber(tau: f64, kappa: f64, z: f64) -> f64 {
    let weight = if z >= 0.0 { tau } else { 1.0 - tau };
    let h = if z.abs() <= kappa {
        z * z / (2.0 * kappa)
    } else {
        z.abs() - kappa / 2.0
    };
    weight * h
}

/// Derivative of [`pinball_huber`] with respect to the residual.
pub fn pinball_huber_derivative(tau: f64, kappa: f64, z: f64) -> f64 {
    if z > kappa {
        tau
    } else if z < -kappa {
        -(1.0 - tau)
    } else {
        let weight = if z >= 0.0 { tau } else { 1.0 - tau };
        weight * z / kappa
    }
}

fn check_inputs(spec: &LossSpec, data: &StratumData, theta: &DVector<f64>) -> Result<()> {
    if theta.len() != data.dim() {
        return Err(Error::Dimension(format!(
            "theta has length {}, features have dimension {}",
            theta.len(),
            data.dim()
        )));
    }
    match spec {
        LossSpec::Logistic => {
            if let Some(i) = data.targets.iter().position(|&y| y != 1.0 && y != -1.0) {
                return Err(Error::Label {
                    family: spec.name(),
                    index: i,
                    value: data.targets[i],
                });
            }
        }
        LossSpec::BernoulliLogit => {
            if data.dim() != 1 {
                return Err(Error::Dimension(
                    "bernoulli_logit strata must have a single parameter".into(),
                ));
            }
            if let Some(i) = data.targets.iter().position(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::Label {
                    family: spec.name(),
                    index: i,
                    value: data.targets[i],
                });
            }
            if let Some(i) = data.features.iter().position(|&x| x != 1.0) {
                return Err(Error::Dimension(format!(
                    "bernoulli_logit feature {i} must be the constant 1"
                )));
            }
        }
        LossSpec::LeastSquares | LossSpec::PinballHuber { .. } => {}
    }
    Ok(())
}

/// Per-sample loss and its derivative with respect to the linear score.
#[inline]
fn sample_loss(spec: &LossSpec, score: f64, y: f64) -> (f64, f64) {
    match *spec {
        LossSpec::LeastSquares => {
            let r = y - score;
            (r * r, -2.0 * r)
        }
        LossSpec::Logistic => {
            let m = y * score;
            (softplus(-m), -y * sigmoid(-m))
        }
        LossSpec::BernoulliLogit => (softplus(score) - y * score, sigmoid(score) - y),
        LossSpec::PinballHuber { tau, kappa } => {
            let r = y - score;
            (
                pinball_huber(tau, kappa, r),
                -pinball_huber_derivative(tau, kappa, r),
            )
        }
    }
}

pub fn loss_value(spec: &LossSpec, data: &StratumData, theta: &DVector<f64>) -> Result<f64> {
    check_inputs(spec, data, theta)?;
    if data.count() == 0 {
        return Ok(0.0);
    }
    let scores = &data.features * theta;
    Ok(scores
        .iter()
        .zip(data.targets.iter())
        .map(|(&s, &y)| sample_loss(spec, s, y).0)
        .sum())
}

pub fn loss_gradient(
    spec: &LossSpec,
    data: &StratumData,
    theta: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(loss_value_and_gradient(spec, data, theta)?.1)
}

pub fn loss_value_and_gradient(
    spec: &LossSpec,
    data: &StratumData,
    theta: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    check_inputs(spec, data, theta)?;
    if data.count() == 0 {
        return Ok((0.0, DVector::zeros(theta.len())));
    }
    let scores = &data.features * theta;
    let mut value = 0.0;
    let mut dscore = DVector::zeros(data.count());
    for (i, (&s, &y)) in scores.iter().zip(data.targets.iter()).enumerate() {
        let (v, d) = sample_loss(spec, s, y);
        value += v;
        dscore[i] = d;
    }
    Ok((value, data.features.tr_mul(&dscore)))
}

/// Sum of per-stratum losses and the `n x K` gradient, column `k` belonging
/// to stratum `k`. Strata are evaluated in parallel when `parallel` is set;
/// the reduction always runs in stratum order.
pub fn total_loss_and_gradient(
    spec: &LossSpec,
    strata: &[StratumData],
    theta: &DMatrix<f64>,
    parallel: bool,
) -> Result<(f64, DMatrix<f64>)> {
    if theta.ncols() != strata.len() {
        return Err(Error::Dimension(format!(
            "theta has {} columns for {} strata",
            theta.ncols(),
            strata.len()
        )));
    }
    let eval = |k: usize| -> Result<(f64, DVector<f64>)> {
        loss_value_and_gradient(spec, &strata[k], &theta.column(k).into_owned())
    };
    let parts: Vec<Result<(f64, DVector<f64>)>> = if parallel {
        (0..strata.len()).into_par_iter().map(eval).collect()
    } else {
        (0..strata.len()).map(eval).collect()
    };
    let mut total = 0.0;
    let mut grad = DMatrix::zeros(theta.nrows(), theta.ncols());
    for (k, part) in parts.into_iter().enumerate() {
        let (v, g) = part?;
        total += v;
        grad.set_column(k, &g);
    }
    Ok((total, grad))
}

/// Value-only counterpart of [`total_loss_and_gradient`].
pub fn total_loss(
    spec: &LossSpec,
    strata: &[StratumData],
    theta: &DMatrix<f64>,
    parallel: bool,
) -> Result<f64> {
    if theta.ncols() != strata.len() {
        return Err(Error::Dimension(format!(
            "theta has {} columns for {} strata",
            theta.ncols(),
            strata.len()
        )));
    }
    let eval = |k: usize| loss_value(spec, &strata[k], &theta.column(k).into_owned());
    let parts: Vec<Result<f64>> = if parallel {
        (0..strata.len()).into_par_iter().map(eval).collect()
    } else {
        (0..strata.len()).map(eval).collect()
    };
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total)
}
