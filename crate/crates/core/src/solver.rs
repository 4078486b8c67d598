//! Monotone accelerated proximal gradient (MAPG).
//!
//! Each iteration takes an accelerated prox step from the extrapolated point
//! and a plain prox step from the current iterate, then keeps whichever has
//! the lower objective. The solver is generic over [`Composite`] so the same
//! loop fits the joint model, the fixed-graph model and every baseline.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{Composite, IterateState};

/// Relative slack allowed in the monotone test, as a fraction of `|F(x_0)|`.
pub const MONOTONE_RTOL: f64 = 1e-10;

/// Consecutive iterations with step norm below `tol` needed to stop.
pub const CONVERGE_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stepsize of the plain step from `x_k`.
    pub alpha_x: f64,
    /// Stepsize of the accelerated step from `y_k`.
    pub alpha_y: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop once `||x_k - x_{k-1}|| < tol` for `CONVERGE_WINDOW` iterations in a row.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Stop after this many validation checks without improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Evaluate the validation score every this many iterations.
    #[serde(default = "default_val_every")]
    pub val_every: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_iters() -> usize {
    5000
}
fn default_tol() -> f64 {
    1e-8
}
fn default_val_every() -> usize {
    1
}

impl SolverConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        SolverConfig {
            alpha_x: alpha,
            alpha_y: alpha,
            max_iters: default_max_iters(),
            tol: default_tol(),
            patience: None,
            val_every: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_x > 0.0 && self.alpha_y > 0.0) {
            return Err(Error::InvalidParameter("stepsizes must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidParameter("tol must be positive".into()));
        }
        if self.max_iters == 0 || self.val_every == 0 {
            return Err(Error::InvalidParameter(
                "max_iters and val_every must be positive".into(),
            ));
        }
        if self.patience == Some(0) {
            return Err(Error::InvalidParameter("patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// Accelerated candidate `z_{k+1}`.
    Accelerated,
    /// Plain candidate `v_{k+1}`.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    EarlyStopped,
    MaxIters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iter: usize,
    pub objective: f64,
    pub step_norm: f64,
    pub branch: Branch,
    pub val_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub initial_objective: f64,
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
    /// Iteration whose iterate was returned.
    pub returned_iter: usize,
}

impl SolverTrace {
    pub fn objectives(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.initial_objective).chain(self.records.iter().map(|r| r.objective))
    }

    pub fn final_objective(&self) -> f64 {
        self.records
            .last()
            .map_or(self.initial_objective, |r| r.objective)
    }

    /// True when no recorded objective exceeds its predecessor by more than
    /// `MONOTONE_RTOL * |F_0|`.
    pub fn is_monotone(&self) -> bool {
        let slack = MONOTONE_RTOL * self.initial_objective.abs();
        let f: Vec<f64> = self.objectives().collect();
        f.windows(2).all(|w| w[1] <= w[0] + slack)
    }

    /// CSV with columns `iter,F,step_norm,branch,val_score`; row 0 is the
    /// starting point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["iter", "F", "step_norm", "branch", "val_score"])?;
        wtr.write_record(["0", &format!("{}", self.initial_objective), "0", "init", ""])?;
        for r in &self.records {
            let branch = match r.branch {
                Branch::Accelerated => "z",
                Branch::Plain => "v",
            };
            let val = r.val_score.map(|v| format!("{v}")).unwrap_or_default();
            wtr.write_record([
                r.iter.to_string(),
                format!("{}", r.objective),
                format!("{}", r.step_norm),
                branch.to_string(),
                val,
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Validation score, lower is better.
pub type Validator<'a> = &'a (dyn Fn(&IterateState) -> f64 + Sync);

/// `t_{k+1} = (sqrt(4 t_k^2 + 1) + 1) / 2`.
pub fn next_momentum(t: f64) -> f64 {
    ((4.0 * t * t + 1.0).sqrt() + 1.0) / 2.0
}

struct Point {
    theta: DMatrix<f64>,
    w: DMatrix<f64>,
}

fn prox_step<P: Composite>(
    p: &P,
    base: &Point,
    alpha: f64,
    frozen_w: &IterateState,
    iter: usize,
) -> Result<IterateState> {
    let grad = p.smooth_gradient_at(&base.theta, &base.w)?;
    if grad.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "theta gradient", iter });
    }
    let theta = p.prox_theta(&(&base.theta - &grad.theta * alpha), alpha);
    let w = match (&grad.w, p.learns_graph()) {
        (Some(gw), true) => {
            if gw.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { what: "W gradient", iter });
            }
            p.prox_w(&(&base.w - gw * alpha), alpha)?
        }
        _ => frozen_w.w.clone(),
    };
    Ok(IterateState { theta, w })
}

fn distance(a: &IterateState, b: &IterateState) -> f64 {
    let dt = (&a.theta - &b.theta).norm_squared();
    let dw = (a.w.as_matrix() - b.w.as_matrix()).norm_squared();
    (dt + dw).sqrt()
}

fn finite_or_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Runs MAPG from `init` (which must have finite objective).
///
/// Returns the best-validation iterate when a validator is supplied,
/// otherwise the last iterate.
pub fn mapg_solve<P: Composite>(
    p: &P,
    init: IterateState,
    cfg: &SolverConfig,
    validation: Option<Validator<'_>>,
) -> Result<(IterateState, SolverTrace)> {
    cfg.validate()?;
    let f0 = p.full_value(&init)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite { what: "objective at the initial point", iter: 0 });
    }
    let slack = MONOTONE_RTOL * f0.abs();

    let mut x_prev = init.clone();
    let mut x = init.clone();
    let mut z = init;
    let mut f_x = f0;
    let (mut t_prev, mut t) = (0.0_f64, 1.0_f64);

    let mut records = Vec::new();
    let mut best: Option<(f64, usize, IterateState)> = None;
    let mut checks_since_best = 0usize;
    let mut small_steps = 0usize;
    let mut termination = Termination::MaxIters;

    if let Some(val) = validation {
        best = Some((val(&x), 0, x.clone()));
    }

    for iter in 1..=cfg.max_iters {
        let a = t_prev / t;
        let b = (t_prev - 1.0) / t;
        let y = Point {
            theta: &x.theta + (&z.theta - &x.theta) * a + (&x.theta - &x_prev.theta) * b,
            w: if p.learns_graph() {
                x.w.as_matrix()
                    + (z.w.as_matrix() - x.w.as_matrix()) * a
                    + (x.w.as_matrix() - x_prev.w.as_matrix()) * b
            } else {
                x.w.as_matrix().clone()
            },
        };
        let xp = Point {
            theta: x.theta.clone(),
            w: x.w.as_matrix().clone(),
        };
        let z_next = prox_step(p, &y, cfg.alpha_y, &x, iter)?;
        let v_next = prox_step(p, &xp, cfg.alpha_x, &x, iter)?;
        let t_next = next_momentum(t);

        let f_z = finite_or_inf(p.full_value(&z_next)?);
        let f_v = finite_or_inf(p.full_value(&v_next)?);
        let (x_next, f_next, branch) = if f_z <= f_v {
            (z_next.clone(), f_z, Branch::Accelerated)
        } else {
            (v_next, f_v, Branch::Plain)
        };
        if !f_next.is_finite() {
            return Err(Error::NonFinite { what: "objective", iter });
        }
        if f_next > f_x + slack {
            return Err(Error::Diverged { iter, previous: f_x, current: f_next });
        }

        let step_norm = distance(&x_next, &x);
        x_prev = std::mem::replace(&mut x, x_next);
        z = z_next;
        f_x = f_next;
        t_prev = t;
        t = t_next;

        let mut val_score = None;
        let mut stop_early = false;
        if let Some(val) = validation {
            if iter % cfg.val_every == 0 {
                let score = val(&x);
                val_score = Some(score);
                match &best {
                    Some((b, _, _)) if !(score < *b) => checks_since_best += 1,
                    _ => {
                        best = Some((score, iter, x.clone()));
                        checks_since_best = 0;
                    }
                }
                if let Some(pat) = cfg.patience {
                    stop_early = checks_since_best >= pat;
                }
            }
        }
        records.push(TraceRecord { iter, objective: f_x, step_norm, branch, val_score });

        small_steps = if step_norm < cfg.tol { small_steps + 1 } else { 0 };
        if small_steps >= CONVERGE_WINDOW {
            termination = Termination::Converged;
            break;
        }
        if stop_early {
            termination = Termination::EarlyStopped;
            break;
        }
    }

    let last_iter = records.last().map_or(0, |r| r.iter);
    let (state, returned_iter) = match best {
        Some((_, it, s)) => (s, it),
        None => (x, last_iter),
    };
    Ok((
        state,
        SolverTrace {
            initial_objective: f0,
            records,
            termination,
            returned_iter,
        },
    ))
}

/// Outcome of one stepsize candidate.
#[derive(Debug, Clone)]
pub struct CandidateOutcome {
    pub alpha: f64,
    pub score: Option<f64>,
    pub failure: Option<String>,
}

/// Picks `alpha_x = alpha_y` from `candidates` by truncated solves of at most
/// `budget_iters` iterations. Scores by validation when available, else by
/// final objective. Candidates that fail or lose monotonicity are rejected.
pub fn stepsize_grid_search<P: Composite>(
    p: &P,
    init: &IterateState,
    base: &SolverConfig,
    candidates: &[f64],
    budget_iters: usize,
    validation: Option<Validator<'_>>,
) -> Result<(SolverConfig, Vec<CandidateOutcome>)> {
    if candidates.is_empty() {
        return Err(Error::InvalidParameter("no stepsize candidates".into()));
    }
    let outcomes: Vec<CandidateOutcome> = candidates
        .par_iter()
        .map(|&alpha| {
            let mut cfg = base.clone();
            cfg.alpha_x = alpha;
            cfg.alpha_y = alpha;
            cfg.max_iters = budget_iters;
            match mapg_solve(p, init.clone(), &cfg, validation) {
                Ok((state, trace)) if trace.is_monotone() => {
                    let score = match validation {
                        Some(v) => v(&state),
                        None => trace.final_objective(),
                    };
                    CandidateOutcome { alpha, score: Some(score), failure: None }
                }
                Ok(_) => CandidateOutcome {
                    alpha,
                    score: None,
                    failure: Some("objective trace not monotone".into()),
                },
                Err(e) => CandidateOutcome { alpha, score: None, failure: Some(e.to_string()) },
            }
        })
        .collect();
    let best = outcomes
        .iter()
        .filter_map(|o| o.score.filter(|s| s.is_finite()).map(|s| (s, o.alpha)))
        .fold(None::<(f64, f64)>, |acc, (s, a)| match acc {
            Some((bs, ba)) if bs < s || (bs == s && ba <= a) => Some((bs, ba)),
            _ => Some((s, a)),
        });
    match best {
        Some((_, alpha)) => {
            let mut cfg = base.clone();
            cfg.alpha_x = alpha;
            cfg.alpha_y = alpha;
            Ok((cfg, outcomes))
        }
        None => {
            let listing = outcomes
                .iter()
                .map(|o| format!("alpha={}: {}", o.alpha, o.failure.as_deref().unwrap_or("no score")))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::NoStepsize(listing))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphRegParams, WeightMatrix};
    use crate::losses::{LossSpec, StratumData};
    use crate::objective::{JointProblem, Mode};
    use crate::regularizers::LocalRegSpec;
    use approx::assert_abs_diff_eq;

    fn worked_example() -> JointProblem {
        let s1 = StratumData::from_rows(&[vec![1.0]], &[1.0], 1).unwrap();
        let s2 = StratumData::from_rows(&[vec![1.0]], &[3.0], 1).unwrap();
        let w = WeightMatrix::from_upper(2, |_, _| 2.0).unwrap();
        JointProblem::new(
            LossSpec::LeastSquares,
            vec![s1, s2],
            LocalRegSpec::None,
            GraphRegParams::fixed(w),
            Mode::FixedW,
        )
        .unwrap()
    }

    #[test]
    fn momentum_sequence() {
        let t2 = next_momentum(1.0);
        assert_abs_diff_eq!(t2, (5f64.sqrt() + 1.0) / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t2, 1.618034, epsilon = 1e-6);
        assert_abs_diff_eq!(next_momentum(t2), 2.193527, epsilon = 1e-6);
    }

    #[test]
    fn worked_example_converges() {
        let p = worked_example();
        let mut cfg = SolverConfig::with_alpha(0.05);
        cfg.max_iters = 2000;
        cfg.tol = 1e-12;
        let (s, trace) = mapg_solve(&p, p.initial_state(), &cfg, None).unwrap();
        assert!(trace.records.len() <= 2000);
        assert_abs_diff_eq!(s.theta[(0, 0)], 5.0 / 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.theta[(0, 1)], 7.0 / 3.0, epsilon = 1e-6);
        assert!(trace.is_monotone());
        assert_eq!(trace.termination, Termination::Converged);
    }

    #[test]
    fn critical_point_start_stops_after_one_window() {
        let p = worked_example();
        let init = IterateState::new(
            DMatrix::from_row_slice(1, 2, &[5.0 / 3.0, 7.0 / 3.0]),
            p.graph_reg.w0.clone(),
        )
        .unwrap();
        let cfg = SolverConfig::with_alpha(0.05);
        let (_, trace) = mapg_solve(&p, init, &cfg, None).unwrap();
        assert_eq!(trace.records.len(), CONVERGE_WINDOW);
        assert!(trace.records.iter().all(|r| r.step_norm < cfg.tol));
        assert!(trace.records.last().unwrap().step_norm < cfg.tol);
    }

    #[test]
    fn oversized_step_is_reported_as_divergence() {
        let p = worked_example();
        let cfg = SolverConfig::with_alpha(10.0);
        match mapg_solve(&p, p.initial_state(), &cfg, None) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn early_stopping_returns_best_validation_iterate() {
        let p = worked_example();
        let mut cfg = SolverConfig::with_alpha(0.05);
        cfg.patience = Some(5);
        cfg.tol = 1e-14;
        // Score prefers theta_1 near 1.2, which the trajectory passes on the
        // way to 5/3.
        let val = |s: &IterateState| (s.theta[(0, 0)] - 1.2).abs();
        let (s, trace) = mapg_solve(&p, p.initial_state(), &cfg, Some(&val)).unwrap();
        assert_eq!(trace.termination, Termination::EarlyStopped);
        let best = trace
            .records
            .iter()
            .filter_map(|r| r.val_score)
            .fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(val(&s), best, epsilon = 0.0);
        assert!(s.theta[(0, 0)] < 5.0 / 3.0 - 1e-3);
    }

    #[test]
    fn grid_search_skips_divergent_candidates() {
        // Stiff quadratic: per-sample curvature 2 * 40^2 = 3200 > 2e3.
        let s1 = StratumData::from_rows(&[vec![40.0]], &[1.0], 1).unwrap();
        let s2 = StratumData::from_rows(&[vec![1.0]], &[3.0], 1).unwrap();
        let p = JointProblem::new(
            LossSpec::LeastSquares,
            vec![s1, s2],
            LocalRegSpec::None,
            GraphRegParams::fixed(WeightMatrix::from_upper(2, |_, _| 1.0).unwrap()),
            Mode::FixedW,
        )
        .unwrap();
        let base = SolverConfig::with_alpha(1.0);
        let (cfg, outcomes) =
            stepsize_grid_search(&p, &p.initial_state(), &base, &[1e3, 1e-4], 200, None).unwrap();
        assert_eq!(cfg.alpha_x, 1e-4);
        assert!(outcomes[0].failure.is_some());

        let (single, _) =
            stepsize_grid_search(&p, &p.initial_state(), &base, &[1e-4], 50, None).unwrap();
        assert_eq!(single.alpha_x, 1e-4);

        assert!(matches!(
            stepsize_grid_search(&p, &p.initial_state(), &base, &[1e3], 50, None),
            Err(Error::NoStepsize(_))
        ));
    }

    #[test]
    fn grid_search_prefers_lower_objective() {
        let p = worked_example();
        let base = SolverConfig::with_alpha(1.0);
        let (cfg, outcomes) =
            stepsize_grid_search(&p, &p.initial_state(), &base, &[1e-4, 0.05], 30, None).unwrap();
        assert_eq!(cfg.alpha_x, 0.05);
        assert!(outcomes[1].score.unwrap() < outcomes[0].score.unwrap());
    }

    #[test]
    fn trace_csv_has_expected_columns() {
        let p = worked_example();
        let mut cfg = SolverConfig::with_alpha(0.05);
        cfg.max_iters = 3;
        let (_, trace) = mapg_solve(&p, p.initial_state(), &cfg, None).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iter,F,step_norm,branch,val_score");
        assert_eq!(lines.count(), 4);
    }
}
