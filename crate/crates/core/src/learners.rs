//! Prior graphs and competing graph-learning formulations.
//!
//! `W0` can come from a kernel on known stratum representations or on the
//! parameters of independent per-stratum fits. The baselines are Entropy
//! (closed form), Log-Diagonal and Tr-Constraint (both solved by MAPG), plus
//! the common and separate degenerate models.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{laplacian_of, GraphRegParams, WeightMatrix};
use crate::losses::{total_loss, total_loss_and_gradient, StratumData};
use crate::objective::{
    laplacian_quadratic, pairwise_sq_dists, prox_columns, Composite, IterateState, JointProblem,
    Mode, SmoothGradient,
};
use crate::regularizers::{local_reg_value, prox_graph};
use crate::solver::{mapg_solve, SolverConfig, SolverTrace, Validator};

/// Degrees below this are floored inside the Log-Diagonal barrier.
pub const DEGREE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `exp(-tau * d)`.
    Exponential { tau: f64 },
    /// 1 when either endpoint is among the other's `k` nearest.
    Knn { k: usize },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Exponential { tau } if !(tau > 0.0 && tau.is_finite()) => {
                Err(Error::InvalidParameter(format!("kernel tau must be positive, got {tau}")))
            }
            KernelSpec::Knn { k: 0 } => Err(Error::InvalidParameter("knn needs k >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Builds `W0` from `K` points and a distance function.
pub fn w0_from_kernel<T>(
    points: &[T],
    dist: impl Fn(&T, &T) -> f64,
    spec: &KernelSpec,
) -> Result<WeightMatrix> {
    spec.validate()?;
    let k = points.len();
    if k < 2 {
        return Err(Error::InvalidParameter(format!("kernel graph needs K >= 2 points, got {k}")));
    }
    let mut d = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = dist(&points[i], &points[j]);
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Numerical(format!("distance between {i} and {j} is {v}")));
            }
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    kernel_from_distances(&d, spec)
}

fn kernel_from_distances(d: &DMatrix<f64>, spec: &KernelSpec) -> Result<WeightMatrix> {
    let k = d.nrows();
    match *spec {
        KernelSpec::Exponential { tau } => WeightMatrix::from_upper(k, |i, j| (-tau * d[(i, j)]).exp()),
        KernelSpec::Knn { k: nn } => {
            if nn > k - 1 {
                return Err(Error::InvalidParameter(format!(
                    "knn with k = {nn} on only {k} points"
                )));
            }
            let mut w = DMatrix::zeros(k, k);
            for i in 0..k {
                let mut others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
                others.sort_by(|&a, &b| d[(i, a)].total_cmp(&d[(i, b)]).then(a.cmp(&b)));
                for &j in &others[..nn] {
                    w[(i, j)] = 1.0;
                    w[(j, i)] = 1.0;
                }
            }
            WeightMatrix::new(w)
        }
    }
}

/// Euclidean distances between parameter columns.
pub fn pairwise_distances(theta: &DMatrix<f64>) -> DMatrix<f64> {
    pairwise_sq_dists(theta).map(f64::sqrt)
}

#[derive(Debug, Clone)]
pub struct IndependentFits {
    pub w0: WeightMatrix,
    /// Column `k` is the independent fit of stratum `k`.
    pub theta: DMatrix<f64>,
    pub warnings: Vec<String>,
}

fn fit_one(p: &JointProblem, data: StratumData, cfg: &SolverConfig) -> Result<DVector<f64>> {
    let single = JointProblem::single_stratum(p.loss.clone(), data, p.local_reg.clone())?;
    let (s, _) = mapg_solve(&single, single.initial_state(), cfg, None)?;
    Ok(s.theta.column(0).into_owned())
}

/// Fits every stratum on its own, then applies the kernel to the fitted
/// parameters. Empty strata get zero rows and columns.
pub fn w0_from_independent_fits(
    p: &JointProblem,
    spec: &KernelSpec,
    cfg: &SolverConfig,
) -> Result<IndependentFits> {
    spec.validate()?;
    let k = p.num_strata();
    let mut theta = DMatrix::zeros(p.dim(), k);
    let mut warnings = Vec::new();
    for (idx, data) in p.strata.iter().enumerate() {
        if data.count() == 0 {
            let msg = format!("stratum {idx} has no samples; its prior edges are set to zero");
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let col = fit_one(p, data.clone(), cfg)
            .map_err(|e| Error::Numerical(format!("independent fit of stratum {idx}: {e}")))?;
        theta.set_column(idx, &col);
    }
    let mut w = kernel_from_distances(&pairwise_distances(&theta), spec)?.into_inner();
    for (idx, data) in p.strata.iter().enumerate() {
        if data.count() == 0 {
            w.row_mut(idx).fill(0.0);
            w.column_mut(idx).fill(0.0);
        }
    }
    Ok(IndependentFits { w0: WeightMatrix::new(w)?, theta, warnings })
}

/// Entropy baseline: `W_ij = exp(-||theta_i - theta_j||^2 / (2 sigma2))`.
pub fn fit_entropy_baseline(theta: &DMatrix<f64>, sigma2: f64) -> Result<WeightMatrix> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {sigma2}")));
    }
    let d2 = pairwise_sq_dists(theta);
    WeightMatrix::from_upper(theta.ncols(), |i, j| (-d2[(i, j)] / (2.0 * sigma2)).exp())
}

/// The entropy-regularized graph objective
/// `sum_{i<j} W_ij d_ij + 2 sigma2 sum_{i<j} W_ij (log W_ij - 1)`, whose
/// minimizer over `W >= 0` is [`fit_entropy_baseline`].
pub fn entropy_graph_objective(theta: &DMatrix<f64>, w: &WeightMatrix, sigma2: f64) -> f64 {
    let d2 = pairwise_sq_dists(theta);
    let k = w.dim();
    let mut acc = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            let x = w.get(i, j);
            acc += x * d2[(i, j)];
            if x > 0.0 {
                acc += 2.0 * sigma2 * x * (x.ln() - 1.0);
            }
        }
    }
    acc
}

/// Euclidean projection of `v` onto `{x >= 0, sum x = c}`.
pub fn project_simplex(v: &[f64], c: f64) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut shift = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - c) / (j + 1) as f64;
        if uj - t > 0.0 {
            shift = t;
        }
    }
    v.iter().map(|&x| (x - shift).max(0.0)).collect()
}

/// Projects a square matrix onto symmetric zero-diagonal `W >= 0` with
/// `sum_{i<j} W_ij = c1 / 2`.
pub fn project_trace_set(u: &DMatrix<f64>, c1: f64) -> Result<WeightMatrix> {
    if !(c1 > 0.0) {
        return Err(Error::InvalidParameter(format!("C1 must be positive, got {c1}")));
    }
    let k = u.nrows();
    if k < 2 || u.ncols() != k {
        return Err(Error::Dimension("trace projection needs a square matrix with K >= 2".into()));
    }
    let mut upper = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            upper.push(0.5 * (u[(i, j)] + u[(j, i)]));
        }
    }
    let proj = project_simplex(&upper, 0.5 * c1);
    let mut it = proj.into_iter();
    WeightMatrix::from_upper(k, |_, _| it.next().unwrap_or(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum GraphPenalty {
    LogDiagonal { c1: f64, c2: f64 },
    TrConstraint { c1: f64, c2: f64 },
}

/// Log-Diagonal and Tr-Constraint objectives over the data of a
/// [`JointProblem`]. The coupling term is `Tr(Theta G(W) Theta^T)` in both.
pub struct BaselineProblem<'a> {
    base: &'a JointProblem,
    penalty: GraphPenalty,
}

impl<'a> BaselineProblem<'a> {
    pub fn log_diagonal(base: &'a JointProblem, c1: f64, c2: f64) -> Result<Self> {
        positive(&[("C1", c1), ("C2", c2)])?;
        Ok(BaselineProblem { base, penalty: GraphPenalty::LogDiagonal { c1, c2 } })
    }

    pub fn tr_constraint(base: &'a JointProblem, c1: f64, c2: f64) -> Result<Self> {
        positive(&[("C1", c1)])?;
        if !(c2 >= 0.0) {
            return Err(Error::InvalidParameter(format!("C2 must be nonnegative, got {c2}")));
        }
        Ok(BaselineProblem { base, penalty: GraphPenalty::TrConstraint { c1, c2 } })
    }

    /// `Theta = 0` and a feasible `W` derived from `W0`.
    pub fn initial_state(&self) -> Result<IterateState> {
        let k = self.num_strata();
        let w0 = &self.base.graph_reg.w0;
        let w = match self.penalty {
            GraphPenalty::TrConstraint { c1, .. } => project_trace_set(w0.as_matrix(), c1)?,
            GraphPenalty::LogDiagonal { c1, c2 } => {
                if w0.degrees().iter().all(|&d| d > 1e-6) {
                    w0.clone()
                } else {
                    // Minimizer of the graph penalty over uniform graphs.
                    let level = (c1 / (c2 * (k - 1) as f64)).sqrt();
                    WeightMatrix::from_upper(k, |_, _| level)?
                }
            }
        };
        Ok(IterateState { theta: DMatrix::zeros(self.dim(), k), w })
    }

    fn penalty_value(&self, w: &DMatrix<f64>) -> f64 {
        match self.penalty {
            GraphPenalty::LogDiagonal { c1, c2 } => {
                let barrier: f64 = w.row_sum().iter().map(|&d| d.max(DEGREE_FLOOR).ln()).sum();
                -c1 * barrier + 0.5 * c2 * w.norm_squared()
            }
            GraphPenalty::TrConstraint { c2, .. } => 0.5 * c2 * laplacian_of(w).norm_squared(),
        }
    }
}

fn positive(values: &[(&str, f64)]) -> Result<()> {
    for &(name, v) in values {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
        }
    }
    Ok(())
}

impl Composite for BaselineProblem<'_> {
    fn num_strata(&self) -> usize {
        self.base.num_strata()
    }

    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn learns_graph(&self) -> bool {
        true
    }

    fn smooth_value(&self, s: &IterateState) -> Result<f64> {
        let loss = total_loss(&self.base.loss, &self.base.strata, &s.theta, self.base.parallel)?;
        let w = s.w.as_matrix();
        Ok(loss + 2.0 * laplacian_quadratic(&s.theta, w) + self.penalty_value(w))
    }

    fn smooth_gradient_at(&self, theta: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<SmoothGradient> {
        let (_, mut dtheta) =
            total_loss_and_gradient(&self.base.loss, &self.base.strata, theta, self.base.parallel)?;
        dtheta += theta * laplacian_of(w) * 2.0;
        let mut dw = pairwise_sq_dists(theta) * 0.5;
        let deg = w.row_sum();
        let k = w.nrows();
        match self.penalty {
            GraphPenalty::LogDiagonal { c1, c2 } => {
                for i in 0..k {
                    for j in 0..k {
                        let inv = 1.0 / deg[i].max(DEGREE_FLOOR) + 1.0 / deg[j].max(DEGREE_FLOOR);
                        dw[(i, j)] += -0.5 * c1 * inv + c2 * w[(i, j)];
                    }
                }
            }
            GraphPenalty::TrConstraint { c2, .. } => {
                for i in 0..k {
                    for j in 0..k {
                        dw[(i, j)] += c2 * (0.5 * (deg[i] + deg[j]) + w[(i, j)]);
                    }
                }
            }
        }
        dw.fill_diagonal(0.0);
        Ok(SmoothGradient { theta: dtheta, w: Some(dw) })
    }

    fn nonsmooth_value(&self, s: &IterateState) -> f64 {
        let mut g = 0.0;
        for k in 0..s.theta.ncols() {
            g += local_reg_value(&self.base.local_reg, &s.theta.column(k).into_owned());
        }
        if let GraphPenalty::TrConstraint { c1, .. } = self.penalty {
            let total: f64 = s.w.upper_triangle().iter().sum();
            if (total - 0.5 * c1).abs() > 1e-9 * c1.max(1.0) {
                return f64::INFINITY;
            }
        }
        g
    }

    fn prox_theta(&self, v: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
        prox_columns(&self.base.local_reg, v, alpha)
    }

    fn prox_w(&self, u: &DMatrix<f64>, alpha: f64) -> Result<WeightMatrix> {
        match self.penalty {
            GraphPenalty::LogDiagonal { .. } => {
                let mut u = u.clone();
                u.fill_diagonal(0.0);
                prox_graph(&u, alpha, 0.0, 0.0)
            }
            GraphPenalty::TrConstraint { c1, .. } => project_trace_set(u, c1),
        }
    }
}

pub fn fit_log_diagonal(
    p: &JointProblem,
    c1: f64,
    c2: f64,
    cfg: &SolverConfig,
    validation: Option<Validator<'_>>,
) -> Result<(IterateState, SolverTrace)> {
    let bp = BaselineProblem::log_diagonal(p, c1, c2)?;
    let (s, trace) = mapg_solve(&bp, bp.initial_state()?, cfg, validation)?;
    if let Some((k, d)) = s.w.degrees().into_iter().enumerate().find(|&(_, d)| d <= DEGREE_FLOOR) {
        return Err(Error::Numerical(format!(
            "log-diagonal barrier blow-up: degree of node {k} is {d}"
        )));
    }
    Ok((s, trace))
}

pub fn fit_tr_constraint(
    p: &JointProblem,
    c1: f64,
    c2: f64,
    cfg: &SolverConfig,
    validation: Option<Validator<'_>>,
) -> Result<(IterateState, SolverTrace)> {
    let bp = BaselineProblem::tr_constraint(p, c1, c2)?;
    mapg_solve(&bp, bp.initial_state()?, cfg, validation)
}

/// One parameter vector fitted on the pooled data of every stratum,
/// repeated in every column.
pub fn fit_common(p: &JointProblem, cfg: &SolverConfig) -> Result<DMatrix<f64>> {
    let pooled = StratumData::pooled(&p.strata, p.dim());
    let col = fit_one(p, pooled, cfg)?;
    Ok(DMatrix::from_fn(p.dim(), p.num_strata(), |r, _| col[r]))
}

/// Strata fitted with no coupling (`W = 0`).
pub fn fit_separate(
    p: &JointProblem,
    cfg: &SolverConfig,
    validation: Option<Validator<'_>>,
) -> Result<(IterateState, SolverTrace)> {
    let k = p.num_strata();
    let sep = JointProblem::new(
        p.loss.clone(),
        p.strata.clone(),
        p.local_reg.clone(),
        GraphRegParams::fixed(WeightMatrix::zeros(k)),
        Mode::FixedW,
    )?
    .with_parallel(p.parallel);
    mapg_solve(&sep, sep.initial_state(), cfg, validation)
}

/// The Laplacian-regularized model on the fixed graph `p.graph_reg.w0`.
pub fn fit_fixed_graph(
    p: &JointProblem,
    cfg: &SolverConfig,
    validation: Option<Validator<'_>>,
) -> Result<(IterateState, SolverTrace)> {
    let fixed = JointProblem::new(
        p.loss.clone(),
        p.strata.clone(),
        p.local_reg.clone(),
        GraphRegParams::fixed(p.graph_reg.w0.clone()),
        Mode::FixedW,
    )?
    .with_parallel(p.parallel);
    mapg_solve(&fixed, fixed.initial_state(), cfg, validation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossSpec;
    use crate::regularizers::LocalRegSpec;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ls_problem(rng: &mut ChaCha8Rng, k: usize, n: usize, m: usize) -> JointProblem {
        let strata = (0..k)
            .map(|_| {
                let rows: Vec<Vec<f64>> =
                    (0..m).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
                let ys: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
                StratumData::from_rows(&rows, &ys, n).unwrap()
            })
            .collect();
        JointProblem::new(
            LossSpec::LeastSquares,
            strata,
            LocalRegSpec::None,
            GraphRegParams::fixed(WeightMatrix::zeros(k)),
            Mode::FixedW,
        )
        .unwrap()
    }

    fn cfg(alpha: f64) -> SolverConfig {
        let mut c = SolverConfig::with_alpha(alpha);
        c.tol = 1e-11;
        c.max_iters = 20000;
        c
    }

    #[test]
    fn exponential_kernel_examples() {
        let pts = [0.0_f64, 0.0, 2f64.ln()];
        let w = w0_from_kernel(&pts, |a, b| (a - b).abs(), &KernelSpec::Exponential { tau: 1.0 })
            .unwrap();
        assert_eq!(w.get(0, 1), 1.0);
        assert_abs_diff_eq!(w.get(0, 2), 0.5, epsilon = 1e-15);
        assert_eq!(w.get(2, 2), 0.0);
    }

    #[test]
    fn knn_kernel() {
        let pts = [0.0_f64, 1.0, 3.0, 10.0];
        let d = |a: &f64, b: &f64| (a - b).abs();
        let full = w0_from_kernel(&pts, d, &KernelSpec::Knn { k: 3 }).unwrap();
        assert_eq!(full.upper_triangle(), vec![1.0; 6]);
        let one = w0_from_kernel(&pts, d, &KernelSpec::Knn { k: 1 }).unwrap();
        // Neighbors: 0->1, 1->0, 2->1, 3->2; symmetrized by max.
        assert_eq!(one.upper_triangle(), vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(w0_from_kernel(&pts, d, &KernelSpec::Knn { k: 4 }).is_err());
        assert!(w0_from_kernel(&pts, |_, _| f64::NAN, &KernelSpec::Knn { k: 1 }).is_err());
    }

    #[test]
    fn independent_fits_identical_strata() {
        let s = StratumData::from_rows(&[vec![1.0, 0.5], vec![0.2, 1.0]], &[1.0, -1.0], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let other = ls_problem(&mut rng, 2, 2, 3).strata[0].clone();
        let p = JointProblem::new(
            LossSpec::LeastSquares,
            vec![s.clone(), s, other],
            LocalRegSpec::Ridge { gamma: 0.1 },
            GraphRegParams::fixed(WeightMatrix::zeros(3)),
            Mode::FixedW,
        )
        .unwrap();
        let fits = w0_from_independent_fits(&p, &KernelSpec::Exponential { tau: 1.0 }, &cfg(0.1))
            .unwrap();
        assert_abs_diff_eq!(fits.w0.get(0, 1), 1.0, epsilon = 1e-8);
        assert!(fits.warnings.is_empty());

        let direct = pairwise_distances(&fits.theta);
        for i in 0..3 {
            for j in 0..3 {
                let d = (fits.theta.column(i) - fits.theta.column(j)).norm();
                assert!((direct[(i, j)] - d).abs() < 1e-10);
                if i != j {
                    assert_abs_diff_eq!(fits.w0.get(i, j), (-d).exp(), epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn independent_fits_flag_empty_strata() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ls_problem(&mut rng, 3, 2, 4);
        p.strata[1] = StratumData::empty(2);
        let fits = w0_from_independent_fits(&p, &KernelSpec::Exponential { tau: 0.5 }, &cfg(0.1))
            .unwrap();
        assert_eq!(fits.warnings.len(), 1);
        assert!(fits.w0.as_matrix().row(1).iter().all(|&v| v == 0.0));
        assert!(fits.w0.get(0, 2) > 0.0);
    }

    #[test]
    fn entropy_closed_form() {
        let theta = DMatrix::from_row_slice(1, 3, &[0.0, 2.0, 0.0]);
        let w = fit_entropy_baseline(&theta, 2.0).unwrap();
        assert_abs_diff_eq!(w.get(0, 1), (-1.0f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(w.get(0, 1), 0.367879, epsilon = 1e-6);
        assert_eq!(w.get(0, 2), 1.0);
        assert!(fit_entropy_baseline(&theta, 0.0).is_err());
    }

    #[test]
    fn entropy_output_minimizes_its_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
        let sigma2 = 0.7;
        let w = fit_entropy_baseline(&theta, sigma2).unwrap();
        let best = entropy_graph_objective(&theta, &w, sigma2);
        for _ in 0..500 {
            let wp = WeightMatrix::from_upper(3, |i, j| {
                (w.get(i, j) + rng.gen_range(-0.05..0.05)).max(0.0)
            })
            .unwrap();
            assert!(entropy_graph_objective(&theta, &wp, sigma2) >= best - 1e-12);
        }
    }

    #[test]
    fn simplex_projection() {
        let v = [0.2, 0.3, 0.5];
        assert_eq!(project_simplex(&v, 1.0), v.to_vec());
        let p = project_simplex(&[3.0, -1.0, 0.5], 1.0);
        assert_eq!(p, vec![1.0, 0.0, 0.0]);
        let p = project_simplex(&[1.0, 1.0, 0.0], 1.0);
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-15);
    }

    /// Active-set enumeration: for each support, the minimizer is
    /// `x = v - t` on the support with `t` fixing the sum.
    fn simplex_oracle(v: &[f64], c: f64) -> Vec<f64> {
        let n = v.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 1u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            let t = (support.iter().map(|&i| v[i]).sum::<f64>() - c) / support.len() as f64;
            let x: Vec<f64> =
                (0..n).map(|i| if mask >> i & 1 == 1 { v[i] - t } else { 0.0 }).collect();
            if x.iter().any(|&xi| xi < -1e-14) {
                continue;
            }
            let obj: f64 = x.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if best.as_ref().map_or(true, |(o, _)| obj < *o) {
                best = Some((obj, x));
            }
        }
        best.unwrap().1
    }

    #[test]
    fn trace_projection_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let c1 = rng.gen_range(0.1..4.0);
            let u = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-2.0..2.0));
            let w = project_trace_set(&u, c1).unwrap();
            let sym = (&u + u.transpose()) * 0.5;
            let want = simplex_oracle(&[sym[(0, 1)], sym[(0, 2)], sym[(1, 2)]], c1 / 2.0);
            for (a, b) in w.upper_triangle().iter().zip(&want) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            let total: f64 = w.upper_triangle().iter().sum();
            assert!((total - c1 / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn trace_projection_fixes_feasible_points() {
        let w = WeightMatrix::from_upper(4, |i, j| (i + j) as f64 * 0.1).unwrap();
        let c1 = 2.0 * w.upper_triangle().iter().sum::<f64>();
        let proj = project_trace_set(w.as_matrix(), c1).unwrap();
        assert!((proj.as_matrix() - w.as_matrix()).abs().max() < 1e-14);
        assert!(project_trace_set(w.as_matrix(), 0.0).is_err());
    }

    fn fd_check<P: Composite>(bp: &P, s: &IterateState, rng: &mut ChaCha8Rng) {
        let g = bp.smooth_gradient_at(&s.theta, s.w.as_matrix()).unwrap();
        let f = |theta: &DMatrix<f64>, w: &DMatrix<f64>| {
            bp.smooth_value(&IterateState { theta: theta.clone(), w: WeightMatrix::new(w.clone()).unwrap() })
                .unwrap()
        };
        let h = 1e-6;
        let k = s.w.dim();
        for _ in 0..5 {
            let i = rng.gen_range(0..k);
            let j = (i + rng.gen_range(1..k)) % k;
            let mut wp = s.w.as_matrix().clone();
            let mut wm = wp.clone();
            wp[(i, j)] += h;
            wp[(j, i)] += h;
            wm[(i, j)] -= h;
            wm[(j, i)] -= h;
            let fd = (f(&s.theta, &wp) - f(&s.theta, &wm)) / (2.0 * h);
            let gw = g.w.as_ref().unwrap();
            assert!((fd - gw[(i, j)] - gw[(j, i)]).abs() < 1e-5, "W ({i},{j}): {fd}");

            let r = rng.gen_range(0..s.theta.nrows());
            let c = rng.gen_range(0..k);
            let mut tp = s.theta.clone();
            let mut tm = s.theta.clone();
            tp[(r, c)] += h;
            tm[(r, c)] -= h;
            let fd = (f(&tp, s.w.as_matrix()) - f(&tm, s.w.as_matrix())) / (2.0 * h);
            assert!((fd - g.theta[(r, c)]).abs() < 1e-5, "theta ({r},{c})");
        }
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let p = ls_problem(&mut rng, 4, 2, 3);
            let s = IterateState {
                theta: DMatrix::from_fn(2, 4, |_, _| rng.gen_range(-1.0..1.0)),
                w: WeightMatrix::from_upper(4, |_, _| rng.gen_range(0.2..1.0)).unwrap(),
            };
            fd_check(&BaselineProblem::log_diagonal(&p, 0.7, 0.3).unwrap(), &s, &mut rng);
            fd_check(&BaselineProblem::tr_constraint(&p, 2.0, 0.4).unwrap(), &s, &mut rng);
        }
    }

    #[test]
    fn log_diagonal_keeps_degrees_positive_and_symmetric() {
        let s = StratumData::from_rows(&[vec![1.0]], &[1.0], 1).unwrap();
        let p = JointProblem::new(
            LossSpec::LeastSquares,
            vec![s.clone(), s],
            LocalRegSpec::None,
            GraphRegParams::fixed(WeightMatrix::zeros(2)),
            Mode::FixedW,
        )
        .unwrap();
        let (st, trace) = fit_log_diagonal(&p, 1.0, 1.0, &cfg(0.05), None).unwrap();
        assert!(trace.is_monotone());
        assert!(st.w.degrees().iter().all(|&d| d > 0.0));
        assert_eq!(st.w.get(0, 1), st.w.get(1, 0));
        // Equal thetas: W minimizes -2 log w + w^2, so w = 1.
        assert_abs_diff_eq!(st.w.get(0, 1), 1.0, epsilon = 1e-5);
    }

    #[test]
    fn tr_constraint_satisfies_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ls_problem(&mut rng, 5, 2, 4);
        let (st, trace) = fit_tr_constraint(&p, 3.0, 0.1, &cfg(0.05), None).unwrap();
        assert!(trace.is_monotone());
        let tr = laplacian_of(st.w.as_matrix()).trace();
        assert!((tr - 3.0).abs() < 1e-10);
    }

    #[test]
    fn common_matches_pooled_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ls_problem(&mut rng, 3, 2, 5);
        let theta = fit_common(&p, &cfg(0.02)).unwrap();
        let pooled = StratumData::pooled(&p.strata, 2);
        let x = pooled.features();
        let want = (x.transpose() * x).lu().solve(&(x.transpose() * pooled.targets())).unwrap();
        for c in 0..3 {
            for r in 0..2 {
                assert_abs_diff_eq!(theta[(r, c)], want[r], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn common_equals_separate_on_identical_strata() {
        let s = StratumData::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![1.0, 0.0]], &[1.0, 0.0, 2.0], 2)
            .unwrap();
        let p = JointProblem::new(
            LossSpec::LeastSquares,
            vec![s.clone(), s.clone(), s],
            LocalRegSpec::None,
            GraphRegParams::fixed(WeightMatrix::zeros(3)),
            Mode::FixedW,
        )
        .unwrap();
        let common = fit_common(&p, &cfg(0.05)).unwrap();
        let (sep, _) = fit_separate(&p, &cfg(0.05), None).unwrap();
        assert!((common - sep.theta).abs().max() < 1e-7);
    }

    #[test]
    fn separate_empty_stratum_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = ls_problem(&mut rng, 3, 2, 4);
        p.strata[2] = StratumData::empty(2);
        p.local_reg = LocalRegSpec::L1 { gamma: 0.1 };
        let (sep, _) = fit_separate(&p, &cfg(0.05), None).unwrap();
        assert!(sep.theta.column(2).iter().all(|&v| v == 0.0));
    }
}
