//! The joint objective `F(Theta, W) = f + g` and its smooth gradient.
//!
//! `f` collects the per-stratum losses, the Laplacian quadratic, the ridge
//! pull toward `W0` and the log-det term; `g` collects the local
//! regularizers, the `l1` penalty on `W` and the feasibility indicator.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{laplacian_of, logdet_gradient_of, logdet_reg_laplacian, GraphRegParams, WeightMatrix};
use crate::losses::{total_loss, total_loss_and_gradient, LossSpec, StratumData};
use crate::regularizers::{local_reg_value, prox_graph, prox_local, LocalRegSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Learn `W` together with `Theta`.
    #[default]
    Joint,
    /// Plain Laplacian-regularized model on the fixed graph `w0`.
    FixedW,
}

/// A feasible point `(Theta, W)`: `Theta` is `n x K`, column `k` is stratum `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub theta: DMatrix<f64>,
    pub w: WeightMatrix,
}

impl IterateState {
    pub fn new(theta: DMatrix<f64>, w: WeightMatrix) -> Result<Self> {
        if theta.ncols() != w.dim() {
            return Err(Error::Dimension(format!(
                "theta has {} columns but W is {}x{}",
                theta.ncols(),
                w.dim(),
                w.dim()
            )));
        }
        Ok(IterateState { theta, w })
    }
}

/// Smooth gradient. `w` is `None` when the graph is not a variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothGradient {
    pub theta: DMatrix<f64>,
    pub w: Option<DMatrix<f64>>,
}

/// What the proximal gradient solver needs from a composite problem.
///
/// Gradients may be requested at extrapolated points whose `W` is not
/// feasible, so they take raw matrices; values are only ever taken at
/// feasible points.
pub trait Composite: Sync {
    fn num_strata(&self) -> usize;
    fn dim(&self) -> usize;
    /// Whether `W` is an optimization variable.
    fn learns_graph(&self) -> bool;
    fn smooth_value(&self, s: &IterateState) -> Result<f64>;
    fn smooth_gradient_at(&self, theta: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<SmoothGradient>;
    /// Nonsmooth part `g`; `+inf` when a constraint is violated.
    fn nonsmooth_value(&self, s: &IterateState) -> f64;
    fn prox_theta(&self, v: &DMatrix<f64>, alpha: f64) -> DMatrix<f64>;
    fn prox_w(&self, u: &DMatrix<f64>, alpha: f64) -> Result<WeightMatrix>;

    fn full_value(&self, s: &IterateState) -> Result<f64> {
        let g = self.nonsmooth_value(s);
        if g == f64::INFINITY {
            return Ok(f64::INFINITY);
        }
        Ok(self.smooth_value(s)? + g)
    }
}

/// Stratified problem with Laplacian coupling and optional graph learning.
#[derive(Debug, Clone)]
pub struct JointProblem {
    pub loss: LossSpec,
    pub strata: Vec<StratumData>,
    pub local_reg: LocalRegSpec,
    pub graph_reg: GraphRegParams,
    pub mode: Mode,
    /// Evaluate per-stratum losses on the rayon pool.
    pub parallel: bool,
}

impl JointProblem {
    pub fn new(
        loss: LossSpec,
        strata: Vec<StratumData>,
        local_reg: LocalRegSpec,
        graph_reg: GraphRegParams,
        mode: Mode,
    ) -> Result<Self> {
        if strata.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "a stratified problem needs K >= 2 strata, got {}",
                strata.len()
            )));
        }
        Self::build(loss, strata, local_reg, graph_reg, mode)
    }

    /// One stratum on its own (independent fits and the pooled common model).
    pub(crate) fn single_stratum(
        loss: LossSpec,
        data: StratumData,
        local_reg: LocalRegSpec,
    ) -> Result<Self> {
        Self::build(
            loss,
            vec![data],
            local_reg,
            GraphRegParams::fixed(WeightMatrix::zeros(1)),
            Mode::FixedW,
        )
    }

    fn build(
        loss: LossSpec,
        strata: Vec<StratumData>,
        local_reg: LocalRegSpec,
        graph_reg: GraphRegParams,
        mode: Mode,
    ) -> Result<Self> {
        loss.validate()?;
        local_reg.validate()?;
        graph_reg.validate()?;
        let dim = strata[0].dim();
        if let Some(k) = strata.iter().position(|s| s.dim() != dim) {
            return Err(Error::Dimension(format!(
                "stratum {k} has dimension {}, expected {dim}",
                strata[k].dim()
            )));
        }
        if graph_reg.w0.dim() != strata.len() {
            return Err(Error::Dimension(format!(
                "W0 is {}x{} for {} strata",
                graph_reg.w0.dim(),
                graph_reg.w0.dim(),
                strata.len()
            )));
        }
        Ok(JointProblem {
            loss,
            strata,
            local_reg,
            graph_reg,
            mode,
            parallel: false,
        })
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    /// Initial point: `W = W0`, `Theta = 0`.
    pub fn initial_state(&self) -> IterateState {
        IterateState {
            theta: DMatrix::zeros(self.dim(), self.num_strata()),
            w: self.graph_reg.w0.clone(),
        }
    }

    fn graph_for<'a>(&'a self, s: &'a IterateState) -> &'a WeightMatrix {
        match self.mode {
            Mode::Joint => &s.w,
            Mode::FixedW => &self.graph_reg.w0,
        }
    }

    fn check_state(&self, theta: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<()> {
        if theta.nrows() != self.dim() || theta.ncols() != self.num_strata() {
            return Err(Error::Dimension(format!(
                "theta is {}x{}, expected {}x{}",
                theta.nrows(),
                theta.ncols(),
                self.dim(),
                self.num_strata()
            )));
        }
        if w.nrows() != self.num_strata() || w.ncols() != self.num_strata() {
            return Err(Error::Dimension("W does not match the number of strata".into()));
        }
        Ok(())
    }

    /// `f` including every graph term, evaluated on matrices that need not be
    /// feasible.
    fn ridge_term(&self, w: &DMatrix<f64>) -> f64 {
        let g = &self.graph_reg;
        let coef = 0.5 * g.lambda2 * (1.0 - g.eta);
        if coef == 0.0 {
            0.0
        } else {
            coef * (w - g.w0.as_matrix()).norm_squared()
        }
    }
}

/// `(1/2) sum_{i<j} W_ij ||theta_i - theta_j||^2`.
pub fn laplacian_quadratic(theta: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let k = theta.ncols();
    let mut acc = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let wij = w[(i, j)];
            if wij != 0.0 {
                acc += wij * (theta.column(i) - theta.column(j)).norm_squared();
            }
        }
    }
    0.5 * acc
}

/// `(1/2) Tr(Theta G(W) Theta^T)`, the trace form of [`laplacian_quadratic`].
pub fn laplacian_quadratic_trace(theta: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    let l = laplacian_of(w);
    0.5 * (theta * l * theta.transpose()).trace()
}

/// `||theta_i - theta_j||^2` for every pair.
pub(crate) fn pairwise_sq_dists(theta: &DMatrix<f64>) -> DMatrix<f64> {
    let k = theta.ncols();
    let mut d = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = (theta.column(i) - theta.column(j)).norm_squared();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

impl Composite for JointProblem {
    fn num_strata(&self) -> usize {
        self.strata.len()
    }

    fn dim(&self) -> usize {
        self.strata[0].dim()
    }

    fn learns_graph(&self) -> bool {
        self.mode == Mode::Joint
    }

    fn smooth_value(&self, s: &IterateState) -> Result<f64> {
        let w = self.graph_for(s);
        self.check_state(&s.theta, w.as_matrix())?;
        let loss = total_loss(&self.loss, &self.strata, &s.theta, self.parallel)?;
        let mut value = loss + laplacian_quadratic(&s.theta, w.as_matrix());
        if self.mode == Mode::Joint {
            value += self.ridge_term(w.as_matrix());
            if self.graph_reg.lambda1 != 0.0 {
                value -= self.graph_reg.lambda1 * logdet_reg_laplacian(w, self.graph_reg.mu)?;
            }
        }
        Ok(value)
    }

    fn smooth_gradient_at(&self, theta: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<SmoothGradient> {
        let w = match self.mode {
            Mode::Joint => w,
            Mode::FixedW => self.graph_reg.w0.as_matrix(),
        };
        self.check_state(theta, w)?;
        let (_, mut dtheta) = total_loss_and_gradient(&self.loss, &self.strata, theta, self.parallel)?;
        dtheta += theta * laplacian_of(w);
        if self.mode == Mode::FixedW {
            return Ok(SmoothGradient { theta: dtheta, w: None });
        }
        let g = &self.graph_reg;
        let mut dw = pairwise_sq_dists(theta) * 0.25;
        let ridge = g.lambda2 * (1.0 - g.eta);
        if ridge != 0.0 {
            dw += (w - g.w0.as_matrix()) * ridge;
        }
        if g.lambda1 != 0.0 {
            dw += logdet_gradient_of(w, g.mu)? * g.lambda1;
        }
        dw.fill_diagonal(0.0);
        Ok(SmoothGradient { theta: dtheta, w: Some(dw) })
    }

    fn nonsmooth_value(&self, s: &IterateState) -> f64 {
        let mut g = 0.0;
        for k in 0..s.theta.ncols() {
            g += local_reg_value(&self.local_reg, &s.theta.column(k).into_owned());
        }
        if self.mode == Mode::Joint {
            g += self.graph_reg.lambda2 * self.graph_reg.eta * s.w.l1_norm();
        }
        g
    }

    fn prox_theta(&self, v: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
        prox_columns(&self.local_reg, v, alpha)
    }

    fn prox_w(&self, u: &DMatrix<f64>, alpha: f64) -> Result<WeightMatrix> {
        prox_graph(u, alpha, self.graph_reg.lambda2, self.graph_reg.eta)
    }
}

pub(crate) fn prox_columns(reg: &LocalRegSpec, v: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let mut out = v.clone();
    for k in 0..v.ncols() {
        let col = prox_local(reg, &v.column(k).into_owned(), alpha);
        out.set_column(k, &col);
    }
    out
}

/// `F` at an arbitrary `(Theta, W)`: `+inf` whenever `W` is infeasible.
pub fn full_value_unchecked<P: Composite>(p: &P, theta: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    match WeightMatrix::new(w.clone()) {
        Ok(w) => p.full_value(&IterateState::new(theta.clone(), w)?),
        Err(Error::InvalidWeights { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}
