//! Sensitivity of a zero-shot stratum to its edge weights.
//!
//! A star graph is centered on stratum `k0`, which has few or no samples, so
//! its parameter comes almost entirely from its neighbors. This module builds
//! such instances, perturbs the weights, measures how far the center moves,
//! and checks the closed-form bound relating edge perturbation to accuracy.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{laplacian_of, symmetric_pseudoinverse, GraphRegParams, WeightMatrix};
use crate::losses::{LossSpec, StratumData};
use crate::objective::{JointProblem, Mode};
use crate::regularizers::LocalRegSpec;
use crate::solver::{mapg_solve, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBoundInputs {
    pub delta: f64,
    pub delta_prime: f64,
    /// Weight of the perturbed edge `(i, k0)`.
    pub w_ik0: f64,
    /// Total weight at the center, `sum_{j != k0} W_{j k0}`.
    pub s: f64,
    /// `||theta_i*|| / max_{j != i} ||theta_j*||`.
    pub a_i: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "value", rename_all = "snake_case")]
pub enum BoundOutcome {
    /// Largest `epsilon / W_{i k0}` compatible with both solutions being
    /// accurate.
    Bound(f64),
    /// Nonpositive denominator: the bound says nothing.
    Vacuous,
}

impl BoundOutcome {
    pub fn value(self) -> Option<f64> {
        match self {
            BoundOutcome::Bound(v) => Some(v),
            BoundOutcome::Vacuous => None,
        }
    }
}

pub fn theorem1_bound(inp: &SensitivityBoundInputs) -> Result<BoundOutcome> {
    let SensitivityBoundInputs { delta, delta_prime, w_ik0, s, a_i } = *inp;
    if !(delta >= 0.0 && delta_prime >= 0.0 && a_i >= 0.0) {
        return Err(Error::InvalidParameter("bound inputs must be nonnegative".into()));
    }
    if !(w_ik0 > 0.0 && s >= w_ik0) {
        return Err(Error::InvalidParameter(format!(
            "need 0 < W_ik0 <= S, got W_ik0 = {w_ik0}, S = {s}"
        )));
    }
    let r = w_ik0 / s;
    let num = 2.0 * (delta + delta_prime + delta * r * a_i);
    let den = (1.0 - (1.0 + 2.0 * delta) * r - delta) * a_i - 1.0 + r - 2.0 * (delta + delta_prime);
    if den <= 0.0 {
        return Ok(BoundOutcome::Vacuous);
    }
    Ok(BoundOutcome::Bound(num / den / r))
}

/// Target parameter norms of the non-center strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImbalanceProfile {
    /// Norms listed in order of the non-center strata.
    Explicit { norms: Vec<f64> },
    /// The last `count` non-center strata get norm `spike`, the rest `base`.
    Spike { base: f64, spike: f64, #[serde(default = "one_usize")] count: usize },
    /// Evenly spaced from `lo` to `hi`.
    Linear { lo: f64, hi: f64 },
}

fn one_usize() -> usize {
    1
}

impl ImbalanceProfile {
    pub fn norms(&self, m: usize) -> Result<Vec<f64>> {
        let out = match self {
            ImbalanceProfile::Explicit { norms } => {
                if norms.len() != m {
                    return Err(Error::InvalidParameter(format!(
                        "profile lists {} norms for {m} non-center strata",
                        norms.len()
                    )));
                }
                norms.clone()
            }
            ImbalanceProfile::Spike { base, spike, count } => {
                (0..m).map(|j| if j + count >= m { *spike } else { *base }).collect()
            }
            ImbalanceProfile::Linear { lo, hi } => (0..m)
                .map(|j| if m == 1 { *lo } else { lo + (hi - lo) * j as f64 / (m - 1) as f64 })
                .collect(),
        };
        if out.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter("profile norms must be positive".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedProfile {
    pub name: String,
    #[serde(flatten)]
    pub profile: ImbalanceProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StarExperimentConfig {
    pub k: usize,
    pub n: usize,
    #[serde(default)]
    pub center: usize,
    #[serde(default = "default_noncenter")]
    pub noncenter_samples: usize,
    /// Center sample sizes for the slope study. The largest also sizes the
    /// generated center data.
    #[serde(default = "default_center_samples")]
    pub center_samples: Vec<usize>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub profiles: Vec<NamedProfile>,
    /// Ridge added to the template covariance.
    #[serde(default = "default_sigma_ridge")]
    pub sigma_ridge: f64,
    pub epsilons: Vec<f64>,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Probability that a spoke appears in a perturbation draw.
    #[serde(default = "default_spoke_prob")]
    pub spoke_prob: f64,
    /// Total center weight of the optimal star; `K - 1` when absent.
    #[serde(default)]
    pub weight_sum: Option<f64>,
    /// Replace the sampled center parameter by the weighted average of its
    /// neighbors so the optimal weights reproduce it exactly.
    #[serde(default = "yes")]
    pub reanchor_center: bool,
    /// Ridge weight on every stratum in the sweeps.
    #[serde(default)]
    pub local_ridge: f64,
    #[serde(default)]
    pub solver: Option<SolverConfig>,
    /// `epsilon / W_{i k0}` ratios tried by the falsification check.
    #[serde(default = "default_ratios")]
    pub falsify_ratios: Vec<f64>,
}

fn default_noncenter() -> usize {
    100
}
fn default_center_samples() -> Vec<usize> {
    vec![0]
}
fn default_noise() -> f64 {
    0.1
}
fn default_sigma_ridge() -> f64 {
    0.1
}
fn default_spoke_prob() -> f64 {
    0.5
}
fn yes() -> bool {
    true
}
fn default_ratios() -> Vec<f64> {
    (-4..=4).flat_map(|e| [1.0, 3.0].map(|m| m * 10f64.powi(e))).collect()
}

impl StarExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.k < 3 {
            return bad(format!("star experiments need K >= 3, got {}", self.k));
        }
        if self.n == 0 || self.center >= self.k {
            return bad("need n >= 1 and a center index below K".into());
        }
        if self.epsilons.is_empty() || self.center_samples.is_empty() || self.profiles.is_empty() {
            return bad("epsilon grid, center sample sizes and profiles must be nonempty".into());
        }
        if self.epsilons.iter().any(|e| !(*e >= 0.0)) {
            return bad("epsilons must be nonnegative".into());
        }
        if !(self.sigma_ridge > 0.0) || !(self.noise_std >= 0.0) || !(self.local_ridge >= 0.0) {
            return bad("sigma_ridge must be positive, noise and ridge nonnegative".into());
        }
        if self.trials == 0 || !(self.spoke_prob > 0.0 && self.spoke_prob <= 1.0) {
            return bad("need trials >= 1 and spoke_prob in (0, 1]".into());
        }
        Ok(())
    }

    fn weight_sum(&self) -> f64 {
        self.weight_sum.unwrap_or((self.k - 1) as f64)
    }
}

/// Lawson-Hanson nonnegative least squares: `min ||A w - b||` over `w >= 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let (m, n) = a.shape();
    if b.len() != m {
        return Err(Error::Dimension("nnls right-hand side length mismatch".into()));
    }
    let tol = 1e-12 * a.norm().max(1.0) * b.norm().max(1.0);
    let mut w = DVector::zeros(n);
    let mut passive = vec![false; n];
    for _outer in 0..(3 * n + 10) {
        let grad = a.transpose() * (b - a * &w);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&x, &y| grad[x].total_cmp(&grad[y]));
        let Some(j) = candidate else {
            return Ok(w);
        };
        passive[j] = true;
        for _inner in 0..(3 * n + 10) {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = a.select_columns(&idx);
            let z_sub = sub
                .clone()
                .svd(true, true)
                .solve(b, 1e-14)
                .map_err(|e| Error::Numerical(format!("nnls subproblem: {e}")))?;
            if z_sub.iter().all(|&v| v > 0.0) {
                for (p, &j) in idx.iter().enumerate() {
                    w[j] = z_sub[p];
                }
                break;
            }
            // Step toward z until the first passive variable hits zero.
            let mut alpha = 1.0_f64;
            for (p, &j) in idx.iter().enumerate() {
                if z_sub[p] <= 0.0 {
                    alpha = alpha.min(w[j] / (w[j] - z_sub[p]));
                }
            }
            for (p, &j) in idx.iter().enumerate() {
                w[j] += alpha * (z_sub[p] - w[j]);
                if w[j] <= tol.min(1e-15) {
                    w[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    Err(Error::Numerical("nnls did not converge".into()))
}

/// A star instance: true parameters, optimal star weights and data.
#[derive(Debug, Clone, PartialEq)]
pub struct StarInstance {
    pub center: usize,
    /// `n x K`; column `k` is `theta_k*`.
    pub theta_star: DMatrix<f64>,
    pub w_star: WeightMatrix,
    /// Non-center data, and the center's full sample pool.
    pub strata: Vec<StratumData>,
    /// Norm of `sum_j w_j (theta_j* - theta_k0*)` before any re-anchoring,
    /// relative to `||theta_k0*||`.
    pub nnls_residual: f64,
}

impl StarInstance {
    pub fn k(&self) -> usize {
        self.theta_star.ncols()
    }

    /// Strata with only the first `center_n` center samples kept.
    pub fn strata_with_center(&self, center_n: usize) -> Vec<StratumData> {
        let mut s = self.strata.clone();
        let c = &self.strata[self.center];
        let keep = center_n.min(c.count());
        s[self.center] = if keep == 0 {
            StratumData::empty(c.dim())
        } else {
            StratumData::new(c.features().rows(0, keep).into_owned(), c.targets().rows(0, keep).into_owned())
                .expect("row prefix of valid data")
        };
        s
    }

    /// `S = sum_{j != k0} W*_{j k0}`.
    pub fn center_weight(&self) -> f64 {
        self.w_star.degrees()[self.center]
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn build_star_instance(
    cfg: &StarExperimentConfig,
    profile: &ImbalanceProfile,
    seed: u64,
) -> Result<StarInstance> {
    cfg.validate()?;
    let (k, n, k0) = (cfg.k, cfg.n, cfg.center);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let template = WeightMatrix::from_upper(k, |i, j| if i == k0 || j == k0 { 1.0 } else { 0.0 })?;
    let mut sigma = symmetric_pseudoinverse(&laplacian_of(template.as_matrix()));
    for i in 0..k {
        sigma[(i, i)] += cfg.sigma_ridge;
    }
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::Numerical("template covariance is not positive definite".into()))?;
    // Each of the n parameter coordinates is an independent draw over strata.
    let z = normal_matrix(&mut rng, n, k);
    let mut theta = z * chol.l().transpose();

    let others: Vec<usize> = (0..k).filter(|&j| j != k0).collect();
    let norms = profile.norms(others.len())?;
    for (&j, &target) in others.iter().zip(&norms) {
        let cur = theta.column(j).norm();
        let scale = if cur > 0.0 { target / cur } else { 0.0 };
        theta.column_mut(j).scale_mut(scale);
    }

    // sum_j w_j (theta_j - theta_k0) = 0 with sum_j w_j = S pinned by an
    // extra heavily weighted row.
    let s_target = cfg.weight_sum();
    let rho = theta.norm().max(1.0) * 1e3;
    let mut a = DMatrix::zeros(n + 1, others.len());
    let mut b = DVector::zeros(n + 1);
    for (p, &j) in others.iter().enumerate() {
        for d in 0..n {
            a[(d, p)] = theta[(d, j)] - theta[(d, k0)];
        }
        a[(n, p)] = rho;
    }
    b[n] = rho * s_target;
    let mut w = nnls(&a, &b)?;
    let total: f64 = w.sum();
    if total <= 0.0 {
        return Err(Error::Numerical("optimal star weights are all zero".into()));
    }
    w *= s_target / total;
    let combo: DVector<f64> = others
        .iter()
        .enumerate()
        .map(|(p, &j)| (theta.column(j) - theta.column(k0)) * w[p])
        .fold(DVector::zeros(n), |acc, v| acc + v);
    let center_norm = theta.column(k0).norm().max(f64::MIN_POSITIVE);
    let nnls_residual = combo.norm() / center_norm;
    if cfg.reanchor_center {
        let avg = others
            .iter()
            .enumerate()
            .map(|(p, &j)| theta.column(j) * w[p])
            .fold(DVector::zeros(n), |acc, v| acc + v)
            / s_target;
        theta.set_column(k0, &avg);
    } else if nnls_residual > 1e-8 {
        log::warn!("star weights leave a relative residual of {nnls_residual:.3e} at the center");
    }
    let mut wm = DMatrix::zeros(k, k);
    for (p, &j) in others.iter().enumerate() {
        wm[(j, k0)] = w[p];
        wm[(k0, j)] = w[p];
    }
    let w_star = WeightMatrix::new(wm)?;

    let center_pool = cfg.center_samples.iter().copied().max().unwrap_or(0);
    let strata = (0..k)
        .map(|j| {
            let m = if j == k0 { center_pool } else { cfg.noncenter_samples };
            if m == 0 {
                return Ok(StratumData::empty(n));
            }
            let x = normal_matrix(&mut rng, m, n);
            let noise = DVector::from_fn(m, |_, _| cfg.noise_std * rng.sample::<f64, _>(StandardNormal));
            let y = &x * theta.column(j) + noise;
            StratumData::new(x, y)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(StarInstance { center: k0, theta_star: theta, w_star, strata, nnls_residual })
}

/// Sparse star perturbation: each spoke present with probability `p` (at
/// least one), `Unif[0, 1]` weights, rescaled to Frobenius norm `norm`.
pub fn draw_star_perturbation(
    k: usize,
    center: usize,
    p: f64,
    norm: f64,
    rng: &mut ChaCha8Rng,
) -> Result<WeightMatrix> {
    let others: Vec<usize> = (0..k).filter(|&j| j != center).collect();
    let mut vals: Vec<f64> =
        others.iter().map(|_| if rng.gen_bool(p) { rng.gen::<f64>() } else { 0.0 }).collect();
    if vals.iter().all(|&v| v == 0.0) {
        let forced = rng.gen_range(0..vals.len());
        vals[forced] = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    }
    let mut w = DMatrix::zeros(k, k);
    for (&j, &v) in others.iter().zip(&vals) {
        w[(j, center)] = v;
        w[(center, j)] = v;
    }
    let cur = w.norm();
    WeightMatrix::new(w * (norm / cur))
}

/// Exact minimizer of `sum_k ||y_k - X_k theta_k||^2 + (ridge/2) sum_k
/// ||theta_k||^2 + (1/2) sum_{i<j} W_ij ||theta_i - theta_j||^2` from the
/// normal equations.
pub fn solve_lrsm_least_squares(
    strata: &[StratumData],
    w: &WeightMatrix,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    let k = strata.len();
    if w.dim() != k || k == 0 {
        return Err(Error::Dimension("W does not match the strata".into()));
    }
    let n = strata[0].dim();
    let l = laplacian_of(w.as_matrix());
    let mut h = DMatrix::zeros(n * k, n * k);
    let mut rhs = DVector::zeros(n * k);
    for (s, d) in strata.iter().enumerate() {
        if d.count() > 0 {
            let x = d.features();
            let xtx = x.transpose() * x * 2.0;
            let mut block = h.view_mut((s * n, s * n), (n, n));
            block += &xtx;
            rhs.rows_mut(s * n, n).copy_from(&(x.transpose() * d.targets() * 2.0));
        }
        for dd in 0..n {
            h[(s * n + dd, s * n + dd)] += ridge;
        }
    }
    for a in 0..k {
        for b in 0..k {
            if l[(a, b)] != 0.0 {
                for dd in 0..n {
                    h[(a * n + dd, b * n + dd)] += l[(a, b)];
                }
            }
        }
    }
    let sol = h
        .cholesky()
        .ok_or_else(|| Error::Numerical("normal equations are singular".into()))?
        .solve(&rhs);
    Ok(DMatrix::from_fn(n, k, |dd, s| sol[s * n + dd]))
}

/// `sum_{j != k0} W_{j k0} theta_j / S`.
pub fn zero_shot_average(theta: &DMatrix<f64>, w: &WeightMatrix, center: usize) -> DVector<f64> {
    let mut acc = DVector::zeros(theta.nrows());
    let mut s = 0.0;
    for j in (0..w.dim()).filter(|&j| j != center) {
        let wj = w.get(j, center);
        acc += theta.column(j) * wj;
        s += wj;
    }
    acc / s
}

fn rel_err(a: nalgebra::DVectorView<f64>, b: nalgebra::DVectorView<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Step `1/L` for the least-squares fixed-graph objective.
fn lipschitz_step(strata: &[StratumData], w: &WeightMatrix, ridge: f64) -> f64 {
    let data = strata
        .iter()
        .filter(|d| d.count() > 0)
        .map(|d| 2.0 * (d.features().transpose() * d.features()).symmetric_eigenvalues().max())
        .fold(0.0, f64::max);
    let lap = 2.0 * w.degrees().into_iter().fold(0.0, f64::max);
    1.0 / (data + lap + ridge)
}

fn mapg_lrsm(
    strata: &[StratumData],
    w: &WeightMatrix,
    ridge: f64,
    solver: Option<&SolverConfig>,
) -> Result<DMatrix<f64>> {
    let local = if ridge > 0.0 { LocalRegSpec::Ridge { gamma: ridge } } else { LocalRegSpec::None };
    let p = JointProblem::new(
        LossSpec::LeastSquares,
        strata.to_vec(),
        local,
        GraphRegParams::fixed(w.clone()),
        Mode::FixedW,
    )?;
    let cfg = match solver {
        Some(c) => c.clone(),
        None => {
            let mut c = SolverConfig::with_alpha(lipschitz_step(strata, w, ridge));
            c.tol = 1e-10;
            c.max_iters = 50_000;
            c
        }
    };
    Ok(mapg_solve(&p, p.initial_state(), &cfg, None)?.0.theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub profile: String,
    pub epsilon: f64,
    pub trial: usize,
    pub center_n: usize,
    /// `||theta_hat_k0 - theta*_k0|| / ||theta*_k0||`; `None` if the fit failed.
    pub error: Option<f64>,
}

/// Center error for every `(epsilon, trial)` at one center sample size.
pub fn perturbation_sweep(
    inst: &StarInstance,
    cfg: &StarExperimentConfig,
    profile: &str,
    center_n: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let k = inst.k();
    let strata = inst.strata_with_center(center_n);
    let norm = inst.w_star.as_matrix().norm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = (0..cfg.trials)
        .map(|_| draw_star_perturbation(k, inst.center, cfg.spoke_prob, norm, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> =
        (0..cfg.trials).flat_map(|t| (0..cfg.epsilons.len()).map(move |e| (t, e))).collect();
    let truth = inst.theta_star.column(inst.center);
    let rows = cells
        .par_iter()
        .map(|&(t, e)| {
            let eps = cfg.epsilons[e];
            let w = WeightMatrix::new(inst.w_star.as_matrix() + draws[t].as_matrix() * eps)?;
            let error = match mapg_lrsm(&strata, &w, cfg.local_ridge, cfg.solver.as_ref()) {
                Ok(theta) => Some(rel_err(theta.column(inst.center), truth)),
                Err(err) => {
                    log::warn!("sweep cell eps={eps} trial={t} failed: {err}");
                    None
                }
            };
            Ok(SweepRow { profile: profile.to_string(), epsilon: eps, trial: t, center_n, error })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(rows)
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    pub mean: f64,
    pub q05: f64,
    pub q95: f64,
    pub valid: usize,
}

pub fn summarize(rows: &[SweepRow], epsilons: &[f64]) -> Vec<EpsilonSummary> {
    epsilons
        .iter()
        .map(|&eps| {
            let mut v: Vec<f64> =
                rows.iter().filter(|r| r.epsilon == eps).filter_map(|r| r.error).collect();
            v.sort_by(f64::total_cmp);
            if v.is_empty() {
                return EpsilonSummary { epsilon: eps, mean: f64::NAN, q05: f64::NAN, q95: f64::NAN, valid: 0 };
            }
            EpsilonSummary {
                epsilon: eps,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                q05: quantile(&v, 0.05),
                q95: quantile(&v, 0.95),
                valid: v.len(),
            }
        })
        .collect()
}

/// Least-squares slope of mean error against epsilon over the three
/// smallest epsilons.
pub fn small_epsilon_slope(summary: &[EpsilonSummary]) -> Result<f64> {
    let mut pts: Vec<(f64, f64)> = summary.iter().map(|s| (s.epsilon, s.mean)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.len() < 3 {
        return Err(Error::InvalidParameter("slope needs at least 3 epsilon values".into()));
    }
    let pts = &pts[..3];
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / 3.0;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / 3.0;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("epsilon values must be distinct".into()));
    }
    Ok(sxy / sxx)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for &p in &idx[i..=j] {
            r[p] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterSizeSummary {
    pub center_n: usize,
    pub slope: f64,
    /// Rank correlation of mean error with epsilon.
    pub spearman: f64,
    pub epsilons: Vec<EpsilonSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub instance_seed: u64,
    pub edge: usize,
    pub ratio: f64,
    pub bound: f64,
    pub delta: f64,
    pub delta_prime: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct FalsificationReport {
    /// Cells with a non-vacuous bound.
    pub checked: usize,
    /// Checked cells whose ratio exceeds the bound.
    pub above_bound: usize,
    pub vacuous: usize,
    pub counterexamples: Vec<Counterexample>,
}

impl FalsificationReport {
    pub fn passed(&self) -> bool {
        self.counterexamples.is_empty()
    }

    pub fn merge(&mut self, other: FalsificationReport) {
        self.checked += other.checked;
        self.above_bound += other.above_bound;
        self.vacuous += other.vacuous;
        self.counterexamples.extend(other.counterexamples);
    }
}

/// Perturbs each positive spoke `(i, k0)` by `ratio * W_{i k0}` for every
/// configured ratio, solves both problems exactly with an empty center and
/// no local regularization, and flags any cell where the ratio exceeds the
/// bound although both solutions are accurate at the measured radii.
pub fn theorem1_falsification(inst: &StarInstance, ratios: &[f64], seed: u64) -> Result<FalsificationReport> {
    let k0 = inst.center;
    let k = inst.k();
    let strata = inst.strata_with_center(0);
    let base = solve_lrsm_least_squares(&strata, &inst.w_star, 0.0)?;
    let truth = &inst.theta_star;
    let norms: Vec<f64> = (0..k).map(|j| truth.column(j).norm()).collect();
    let s = inst.center_weight();
    let errs = |theta: &DMatrix<f64>| -> (f64, f64) {
        let non_center = (0..k)
            .filter(|&j| j != k0)
            .map(|j| rel_err(theta.column(j), truth.column(j)))
            .fold(0.0, f64::max);
        (non_center, rel_err(theta.column(k0), truth.column(k0)))
    };
    let (d0, c0) = errs(&base);

    let mut report = FalsificationReport::default();
    for i in (0..k).filter(|&i| i != k0 && inst.w_star.get(i, k0) > 0.0) {
        let w_ik0 = inst.w_star.get(i, k0);
        let max_other = (0..k).filter(|&j| j != i).map(|j| norms[j]).fold(0.0, f64::max);
        let a_i = norms[i] / max_other;
        for &ratio in ratios {
            let eps = ratio * w_ik0;
            let mut wp = inst.w_star.as_matrix().clone();
            wp[(i, k0)] += eps;
            wp[(k0, i)] += eps;
            let pert = solve_lrsm_least_squares(&strata, &WeightMatrix::new(wp)?, 0.0)?;
            let (d1, c1) = errs(&pert);
            let delta = d0.max(d1);
            let delta_prime = c0.max(c1);
            let inputs = SensitivityBoundInputs { delta, delta_prime, w_ik0, s, a_i };
            match theorem1_bound(&inputs)? {
                BoundOutcome::Vacuous => report.vacuous += 1,
                BoundOutcome::Bound(bound) => {
                    report.checked += 1;
                    if ratio > bound {
                        report.above_bound += 1;
                        // Both solutions are accurate at radii (delta,
                        // delta_prime) by construction, so this contradicts
                        // the bound.
                        report.counterexamples.push(Counterexample {
                            instance_seed: seed,
                            edge: i,
                            ratio,
                            bound,
                            delta,
                            delta_prime,
                        });
                    }
                }
            }
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub profile: String,
    pub nnls_residual: f64,
    pub per_center: Vec<CenterSizeSummary>,
    pub falsification: FalsificationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub profiles: Vec<ProfileReport>,
    #[serde(skip)]
    pub rows: Vec<SweepRow>,
}

impl SensitivityReport {
    pub fn passed(&self) -> bool {
        self.profiles.iter().all(|p| p.falsification.passed())
    }

    /// CSV with columns `profile,epsilon,trial,center_n,error`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["profile", "epsilon", "trial", "center_n", "error"])?;
        for r in &self.rows {
            wtr.write_record([
                r.profile.clone(),
                format!("{}", r.epsilon),
                r.trial.to_string(),
                r.center_n.to_string(),
                r.error.map(|e| format!("{e}")).unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Every profile: build the instance, sweep each center sample size, fit
/// slopes and run the falsification check.
pub fn run_sensitivity(cfg: &StarExperimentConfig) -> Result<SensitivityReport> {
    cfg.validate()?;
    let mut profiles = Vec::new();
    let mut rows = Vec::new();
    for (p_idx, named) in cfg.profiles.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(1000 * p_idx as u64);
        let inst = build_star_instance(cfg, &named.profile, seed)?;
        let mut per_center = Vec::new();
        for &cn in &cfg.center_samples {
            let r = perturbation_sweep(&inst, cfg, &named.name, cn, seed.wrapping_add(1))?;
            let summary = summarize(&r, &cfg.epsilons);
            let slope = small_epsilon_slope(&summary)?;
            let (xs, ys): (Vec<f64>, Vec<f64>) = summary.iter().map(|s| (s.epsilon, s.mean)).unzip();
            per_center.push(CenterSizeSummary { center_n: cn, slope, spearman: spearman(&xs, &ys), epsilons: summary });
            rows.extend(r);
        }
        let falsification = theorem1_falsification(&inst, &cfg.falsify_ratios, seed)?;
        profiles.push(ProfileReport {
            profile: named.name.clone(),
            nnls_residual: inst.nnls_residual,
            per_center,
            falsification,
        });
    }
    Ok(SensitivityReport { profiles, rows })
}
