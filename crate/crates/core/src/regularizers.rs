//! Local parameter regularizers with their proximal operators, and the
//! closed-form prox of the graph-side nonsmooth term.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::WeightMatrix;

/// Regularizer `r(theta)` applied to every stratum's parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LocalRegSpec {
    #[default]
    None,
    /// `gamma * ||theta||_1`
    L1 { gamma: f64 },
    /// `(gamma / 2) * ||theta||^2`
    Ridge { gamma: f64 },
    /// `gamma * (mix * ||theta||_1 + (1 - mix) / 2 * ||theta||^2)`
    ElasticNet { gamma: f64, mix: f64 },
    /// Coordinatewise bounds; a single entry applies to every coordinate.
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl LocalRegSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            LocalRegSpec::None => Ok(()),
            LocalRegSpec::L1 { gamma } | LocalRegSpec::Ridge { gamma } => {
                if *gamma >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidParameter(format!("gamma must be nonnegative, got {gamma}")))
                }
            }
            LocalRegSpec::ElasticNet { gamma, mix } => {
                if !(*gamma >= 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "gamma must be nonnegative, got {gamma}"
                    )));
                }
                if !(0.0..=1.0).contains(mix) {
                    return Err(Error::InvalidParameter(format!("mix must lie in [0, 1], got {mix}")));
                }
                Ok(())
            }
            LocalRegSpec::Box { lo, hi } => {
                if lo.len() != hi.len() || lo.is_empty() {
                    return Err(Error::InvalidParameter(
                        "box bounds need matching nonempty lo/hi".into(),
                    ));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return Err(Error::InvalidParameter("box bounds need lo <= hi".into()));
                }
                Ok(())
            }
        }
    }

    /// Whether the proximal map is nonexpansive (all kinds here are convex).
    pub fn is_convex(&self) -> bool {
        true
    }
}

fn bound(values: &[f64], i: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[i]
    }
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// `argmin_theta r(theta) + ||theta - v||^2 / (2 alpha)`.
pub fn prox_local(spec: &LocalRegSpec, v: &DVector<f64>, alpha: f64) -> DVector<f64> {
    match spec {
        LocalRegSpec::None => v.clone(),
        LocalRegSpec::L1 { gamma } => v.map(|x| soft_threshold(x, alpha * gamma)),
        LocalRegSpec::Ridge { gamma } => v / (1.0 + alpha * gamma),
        LocalRegSpec::ElasticNet { gamma, mix } => {
            let shrink = 1.0 + alpha * gamma * (1.0 - mix);
            v.map(|x| soft_threshold(x, alpha * gamma * mix) / shrink)
        }
        LocalRegSpec::Box { lo, hi } => {
            DVector::from_fn(v.len(), |i, _| v[i].clamp(bound(lo, i), bound(hi, i)))
        }
    }
}

/// `r(theta)`; `+inf` outside a box.
pub fn local_reg_value(spec: &LocalRegSpec, theta: &DVector<f64>) -> f64 {
    match spec {
        LocalRegSpec::None => 0.0,
        LocalRegSpec::L1 { gamma } => gamma * theta.iter().map(|x| x.abs()).sum::<f64>(),
        LocalRegSpec::Ridge { gamma } => 0.5 * gamma * theta.norm_squared(),
        LocalRegSpec::ElasticNet { gamma, mix } => {
            gamma
                * (mix * theta.iter().map(|x| x.abs()).sum::<f64>()
                    + 0.5 * (1.0 - mix) * theta.norm_squared())
        }
        LocalRegSpec::Box { lo, hi } => {
            let inside = theta
                .iter()
                .enumerate()
                .all(|(i, &x)| x >= bound(lo, i) && x <= bound(hi, i));
            if inside {
                0.0
            } else {
                f64::INFINITY
            }
        }
    }
}

/// Prox of `lambda2 * eta * ||W||_1` plus the feasibility indicator:
/// symmetrize, shrink by `lambda2 * alpha * eta`, clamp at zero.
pub fn prox_graph(u: &DMatrix<f64>, alpha: f64, lambda2: f64, eta: f64) -> Result<WeightMatrix> {
    let k = u.nrows();
    if u.ncols() != k {
        return Err(Error::Dimension("prox_graph needs a square matrix".into()));
    }
    if let Some(i) = (0..k).find(|&i| u[(i, i)] != 0.0) {
        return Err(Error::InvalidWeights {
            row: i,
            col: i,
            reason: "prox_graph input must have zero diagonal".into(),
        });
    }
    let shrink = lambda2 * alpha * eta;
    WeightMatrix::from_upper(k, |i, j| (0.5 * (u[(i, j)] + u[(j, i)]) - shrink).max(0.0))
}
