//! End-to-end runs driven by one JSON config: ingest, build the prior graph,
//! fit the chosen model, evaluate.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cv::{kfold_cv, CvResult, HyperParams};
use crate::data::{ingest_csv, path_product_w0, IngestConfig, StratifiedDataset};
use crate::error::{Error, Result};
use crate::graph::{GraphRegParams, WeightMatrix};
use crate::learners::{fit_entropy_baseline, w0_from_independent_fits, BaselineProblem, KernelSpec};
use crate::losses::{LossSpec, StratumData};
use crate::metrics::{evaluate, selection_score, MetricsReport, SplitMetrics};
use crate::objective::{Composite, IterateState, JointProblem, Mode};
use crate::regularizers::LocalRegSpec;
use crate::solver::{mapg_solve, stepsize_grid_search, SolverConfig, SolverTrace};

/// Deserializes JSON, reporting the path of the offending field on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::config(path, e.into_inner().to_string())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSettings {
    #[serde(default)]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default)]
    pub eta: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
}

fn default_mu() -> f64 {
    1.0
}

impl Default for GraphSettings {
    fn default() -> Self {
        GraphSettings { lambda1: 0.0, lambda2: 0.0, eta: 0.0, mu: 1.0 }
    }
}

/// Where `W0` comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum W0Source {
    #[default]
    Zero,
    /// Product of path graphs over the stratification bins, using each
    /// column's `gamma`.
    PathProduct,
    Csv { path: PathBuf },
    IndependentFits { kernel: KernelSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Joint fit of `Theta` and `W` with the log-det graph regularizer.
    Joint,
    /// Laplacian-regularized fit on a fixed graph: `w0` when given, else
    /// the config's `W0`.
    LrsmFixed {
        #[serde(default)]
        w0: Option<W0Source>,
    },
    Common,
    Separate,
    LogDiagonal { c1: f64, c2: f64 },
    TrConstraint { c1: f64, #[serde(default)] c2: f64 },
    /// Separate fits, closed-form entropy graph, then a fixed-graph fit.
    Entropy { sigma2: f64 },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Joint => "joint",
            ModelSpec::LrsmFixed { .. } => "lrsm_fixed",
            ModelSpec::Common => "common",
            ModelSpec::Separate => "separate",
            ModelSpec::LogDiagonal { .. } => "log_diagonal",
            ModelSpec::TrConstraint { .. } => "tr_constraint",
            ModelSpec::Entropy { .. } => "entropy",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    /// Fixed stepsize for both MAPG steps; grid-searched when absent.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_grid_budget")]
    pub grid_budget: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Early stopping on the validation split.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "default_val_every")]
    pub val_every: usize,
}

fn default_alpha_grid() -> Vec<f64> {
    vec![1.0, 0.3, 0.1, 0.03, 0.01, 0.003, 0.001, 3e-4, 1e-4]
}
fn default_grid_budget() -> usize {
    200
}
fn default_max_iters() -> usize {
    3000
}
fn default_tol() -> f64 {
    1e-7
}
fn default_val_every() -> usize {
    1
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            alpha: None,
            alpha_grid: default_alpha_grid(),
            grid_budget: default_grid_budget(),
            max_iters: default_max_iters(),
            tol: default_tol(),
            patience: None,
            val_every: 1,
        }
    }
}

impl SolverSettings {
    fn config(&self, alpha: f64, seed: u64) -> SolverConfig {
        SolverConfig {
            alpha_x: alpha,
            alpha_y: alpha,
            max_iters: self.max_iters,
            tol: self.tol,
            patience: self.patience,
            val_every: self.val_every,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSettings {
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub grid: Vec<HyperParams>,
}

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// CSV file, relative to the config file's directory.
    pub data: PathBuf,
    pub dataset: IngestConfig,
    pub loss: LossSpec,
    #[serde(default)]
    pub local_reg: LocalRegSpec,
    #[serde(default)]
    pub graph: GraphSettings,
    #[serde(default)]
    pub w0: W0Source,
    pub model: ModelSpec,
    /// Extra methods compared by the report, besides joint, common and separate.
    #[serde(default)]
    pub baselines: Vec<ModelSpec>,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub cv: Option<CvSettings>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    /// Parses JSON, reporting the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.data.is_relative() {
            self.data = base.join(&self.data);
        }
        let resolve = |src: &mut W0Source| {
            if let W0Source::Csv { path } = src {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        resolve(&mut self.w0);
        for m in std::iter::once(&mut self.model).chain(&mut self.baselines) {
            if let ModelSpec::LrsmFixed { w0: Some(src) } = m {
                resolve(src);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |field: &str, r: Result<()>| {
            r.map_err(|e| match e {
                Error::Config { .. } => e,
                other => Error::config(field, other.to_string()),
            })
        };
        wrap("loss", self.loss.validate())?;
        wrap("local_reg", self.local_reg.validate())?;
        wrap("dataset.split", self.dataset.split.validate())?;
        if let Some(s) = self.dataset.strata.iter().position(|s| s.bins == 0) {
            return Err(Error::config(format!("dataset.strata[{s}].bins"), "bin count must be >= 1"));
        }
        if self.solver.alpha.is_none() && self.solver.alpha_grid.is_empty() {
            return Err(Error::config("solver.alpha_grid", "give alpha or a nonempty grid"));
        }
        if let Some(a) = self.solver.alpha {
            if !(a > 0.0) {
                return Err(Error::config("solver.alpha", "stepsize must be positive"));
            }
        }
        let g = &self.graph;
        if !(g.lambda1 >= 0.0 && g.lambda2 >= 0.0 && (0.0..=1.0).contains(&g.eta) && g.mu > 0.0) {
            return Err(Error::config("graph", "need lambda1, lambda2 >= 0, eta in [0, 1], mu > 0"));
        }
        match self.model {
            ModelSpec::LogDiagonal { c1, c2 } if !(c1 > 0.0 && c2 > 0.0) => {
                Err(Error::config("model", "log_diagonal needs c1, c2 > 0"))
            }
            ModelSpec::TrConstraint { c1, c2 } if !(c1 > 0.0 && c2 >= 0.0) => {
                Err(Error::config("model", "tr_constraint needs c1 > 0 and c2 >= 0"))
            }
            ModelSpec::Entropy { sigma2 } if !(sigma2 > 0.0) => {
                Err(Error::config("model.sigma2", "sigma2 must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Everything a fit produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: String,
    pub theta: DMatrix<f64>,
    pub w: WeightMatrix,
    pub trace: Option<SolverTrace>,
    pub alpha: Option<f64>,
    pub metrics: MetricsReport,
    pub warnings: Vec<String>,
}

fn evaluate_all(loss: &LossSpec, theta: &DMatrix<f64>, ds: &StratifiedDataset) -> Result<MetricsReport> {
    let split = |s: &[StratumData]| -> Result<Option<SplitMetrics>> {
        if s.iter().all(|d| d.count() == 0) {
            Ok(None)
        } else {
            evaluate(loss, theta, s).map(Some)
        }
    };
    Ok(MetricsReport {
        train: evaluate(loss, theta, &ds.train)?,
        val: split(&ds.val)?,
        test: split(&ds.test)?,
    })
}

/// Grid-searches the stepsize unless one is fixed, then solves.
fn solve<P: Composite>(
    p: &P,
    init: IterateState,
    settings: &SolverSettings,
    seed: u64,
    validation: Option<&(dyn Fn(&IterateState) -> f64 + Sync)>,
) -> Result<(IterateState, SolverTrace, f64)> {
    let Some(alpha) = settings.alpha else {
        let base = settings.config(settings.alpha_grid[0], seed);
        let (cfg, _) = stepsize_grid_search(
            p,
            &init,
            &base,
            &settings.alpha_grid,
            settings.grid_budget,
            validation,
        )?;
        // A candidate can pass the truncated budget and still blow up later;
        // fall back to the smaller candidates in turn.
        let mut fallbacks: Vec<f64> =
            settings.alpha_grid.iter().copied().filter(|&a| a < cfg.alpha_x).collect();
        fallbacks.sort_by(|a, b| b.total_cmp(a));
        let mut last = None;
        for alpha in std::iter::once(cfg.alpha_x).chain(fallbacks) {
            match mapg_solve(p, init.clone(), &settings.config(alpha, seed), validation) {
                Ok((s, trace)) => return Ok((s, trace, alpha)),
                Err(e @ (Error::Diverged { .. } | Error::NonFinite { .. } | Error::Numerical(_))) => {
                    log::warn!("stepsize {alpha} failed in the full solve: {e}");
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        return Err(last.expect("at least one stepsize was tried"));
    };
    let (s, trace) = mapg_solve(p, init, &settings.config(alpha, seed), validation)?;
    Ok((s, trace, alpha))
}

fn broadcast(col: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(col.nrows(), k, |r, _| col[(r, 0)])
}

pub fn build_w0(
    cfg: &ExperimentConfig,
    source: &W0Source,
    ds: &StratifiedDataset,
    warnings: &mut Vec<String>,
) -> Result<WeightMatrix> {
    let k = ds.num_strata();
    match source {
        W0Source::Zero => Ok(WeightMatrix::zeros(k)),
        W0Source::PathProduct => {
            let gammas: Vec<f64> = cfg.dataset.strata.iter().map(|s| s.gamma).collect();
            path_product_w0(&ds.bin_counts, &gammas)
        }
        W0Source::Csv { path } => {
            let w = WeightMatrix::load(path)?;
            if w.dim() != k {
                return Err(Error::config("w0.path", format!("W0 is {0}x{0} but there are {k} strata", w.dim())));
            }
            Ok(w)
        }
        W0Source::IndependentFits { kernel } => {
            let p = JointProblem::new(
                cfg.loss,
                ds.train.clone(),
                cfg.local_reg.clone(),
                GraphRegParams::fixed(WeightMatrix::zeros(k)),
                Mode::FixedW,
            )?;
            let alpha = cfg.solver.alpha.unwrap_or(cfg.solver.alpha_grid[cfg.solver.alpha_grid.len() / 2]);
            let fits = w0_from_independent_fits(&p, kernel, &cfg.solver.config(alpha, cfg.seed))?;
            warnings.extend(fits.warnings);
            Ok(fits.w0)
        }
    }
}

/// Fits `model` on `train` and returns `(theta, W, trace, alpha)`.
/// `val` drives early stopping when it has samples and patience is set.
#[allow(clippy::type_complexity)]
fn fit_model(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    train: &[StratumData],
    val: &[StratumData],
    w0: &WeightMatrix,
) -> Result<(DMatrix<f64>, WeightMatrix, Option<SolverTrace>, Option<f64>)> {
    let k = train.len();
    let loss = cfg.loss;
    let has_val = cfg.solver.patience.is_some() && val.iter().any(|d| d.count() > 0);
    let score = |theta: &DMatrix<f64>| -> f64 {
        evaluate(&loss, theta, val).map(|m| selection_score(&loss, &m)).unwrap_or(f64::INFINITY)
    };
    let full = |s: &IterateState| score(&s.theta);
    let validation: Option<&(dyn Fn(&IterateState) -> f64 + Sync)> = if has_val { Some(&full) } else { None };
    let g = &cfg.graph;
    let make = |graph: GraphRegParams, mode: Mode| {
        JointProblem::new(loss, train.to_vec(), cfg.local_reg.clone(), graph, mode)
    };
    let settings = &cfg.solver;
    match model {
        ModelSpec::Joint => {
            let p = make(GraphRegParams::new(g.lambda1, g.lambda2, g.eta, g.mu, w0.clone())?, Mode::Joint)?;
            let (s, t, a) = solve(&p, p.initial_state(), settings, cfg.seed, validation)?;
            Ok((s.theta, s.w, Some(t), Some(a)))
        }
        ModelSpec::LrsmFixed { .. } | ModelSpec::Separate => {
            let w = if *model == ModelSpec::Separate { WeightMatrix::zeros(k) } else { w0.clone() };
            let p = make(GraphRegParams::fixed(w.clone()), Mode::FixedW)?;
            let (s, t, a) = solve(&p, p.initial_state(), settings, cfg.seed, validation)?;
            Ok((s.theta, w, Some(t), Some(a)))
        }
        ModelSpec::Common => {
            let dim = train[0].dim();
            let pooled = StratumData::pooled(train, dim);
            let p = JointProblem::single_stratum(loss, pooled, cfg.local_reg.clone())?;
            let common_val = |s: &IterateState| score(&broadcast(&s.theta, k));
            let v: Option<&(dyn Fn(&IterateState) -> f64 + Sync)> =
                if has_val { Some(&common_val) } else { None };
            let (s, t, a) = solve(&p, p.initial_state(), settings, cfg.seed, v)?;
            Ok((broadcast(&s.theta, k), WeightMatrix::zeros(k), Some(t), Some(a)))
        }
        ModelSpec::LogDiagonal { c1, c2 } | ModelSpec::TrConstraint { c1, c2 } => {
            let p = make(GraphRegParams::fixed(w0.clone()), Mode::FixedW)?;
            let bp = if matches!(model, ModelSpec::LogDiagonal { .. }) {
                BaselineProblem::log_diagonal(&p, *c1, *c2)?
            } else {
                BaselineProblem::tr_constraint(&p, *c1, *c2)?
            };
            let (s, t, a) = solve(&bp, bp.initial_state()?, settings, cfg.seed, validation)?;
            Ok((s.theta, s.w, Some(t), Some(a)))
        }
        ModelSpec::Entropy { sigma2 } => {
            let (sep, _, _, _) = fit_model(cfg, &ModelSpec::Separate, train, val, w0)?;
            let w = fit_entropy_baseline(&sep, *sigma2)?;
            let p = make(GraphRegParams::fixed(w.clone()), Mode::FixedW)?;
            let (s, t, a) = solve(&p, p.initial_state(), settings, cfg.seed, validation)?;
            Ok((s.theta, w, Some(t), Some(a)))
        }
    }
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<StratifiedDataset> {
    ingest_csv(&cfg.data, &cfg.dataset, &cfg.loss, cfg.seed)
}

/// Runs `model` (or the config's own model) end to end.
pub fn run_experiment(cfg: &ExperimentConfig, model: Option<&ModelSpec>) -> Result<RunOutput> {
    let ds = load_dataset(cfg)?;
    run_on_dataset(cfg, &ds, model)
}

pub fn run_on_dataset(
    cfg: &ExperimentConfig,
    ds: &StratifiedDataset,
    model: Option<&ModelSpec>,
) -> Result<RunOutput> {
    let model = model.unwrap_or(&cfg.model);
    let mut warnings = Vec::new();
    for (k, d) in ds.train.iter().enumerate() {
        if d.count() == 0 {
            warnings.push(format!("stratum {k} has no training samples"));
        }
    }
    let source = match model {
        ModelSpec::LrsmFixed { w0: Some(src) } => src,
        _ => &cfg.w0,
    };
    let w0 = build_w0(cfg, source, ds, &mut warnings)?;
    let (theta, w, trace, alpha) = fit_model(cfg, model, &ds.train, &ds.val, &w0)?;
    let metrics = evaluate_all(&cfg.loss, &theta, ds)?;
    Ok(RunOutput { model: model.name().to_string(), theta, w, trace, alpha, metrics, warnings })
}

fn apply_cell(cfg: &ExperimentConfig, h: &HyperParams) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.graph.lambda1 = h.lambda1;
    c.graph.lambda2 = h.lambda2;
    c.local_reg = match c.local_reg {
        LocalRegSpec::L1 { .. } => LocalRegSpec::L1 { gamma: h.gamma_local },
        LocalRegSpec::Ridge { .. } => LocalRegSpec::Ridge { gamma: h.gamma_local },
        LocalRegSpec::ElasticNet { mix, .. } => LocalRegSpec::ElasticNet { gamma: h.gamma_local, mix },
        other => other,
    };
    if h.alpha > 0.0 {
        c.solver.alpha = Some(h.alpha);
    }
    c.solver.patience = None;
    c
}

/// k-fold cross-validation of the config's model over its grid, on the
/// training and validation splits combined.
pub fn run_cv(cfg: &ExperimentConfig) -> Result<CvResult> {
    let cv = cfg
        .cv
        .as_ref()
        .ok_or_else(|| Error::config("cv", "the cv subcommand needs a `cv` section"))?;
    let ds = load_dataset(cfg)?;
    let dim = ds.dim();
    let pool: Vec<StratumData> = ds
        .train
        .iter()
        .zip(&ds.val)
        .map(|(a, b)| StratumData::pooled([a, b], dim))
        .collect();
    let mut warnings = Vec::new();
    let source = match &cfg.model {
        ModelSpec::LrsmFixed { w0: Some(src) } => src,
        _ => &cfg.w0,
    };
    let w0 = build_w0(cfg, source, &ds, &mut warnings)?;
    kfold_cv(&pool, cv.folds, cfg.seed, &cv.grid, |h, tr, va| {
        let c = apply_cell(cfg, h);
        let (theta, _, _, _) = fit_model(&c, &c.model, tr, &[], &w0)?;
        let m = evaluate(&c.loss, &theta, va)?;
        Ok(selection_score(&c.loss, &m))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    const TOY: &str = r#"{
        "data": "toy.csv",
        "dataset": {
            "target": {"column": "y"},
            "features": [],
            "strata": [{"column": "z", "bins": 2}],
            "intercept": true,
            "standardize": false,
            "split": {"train": 1.0, "test": 0.0}
        },
        "loss": {"family": "least_squares"},
        "graph": {},
        "w0": {"source": "path_product"},
        "model": {"kind": "lrsm_fixed"},
        "solver": {"alpha": 0.05, "tol": 1e-12, "max_iters": 5000}
    }"#;

    fn toy_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let mut f = std::fs::File::create(dir.path().join("toy.csv")).unwrap();
        writeln!(f, "z,y\n0,1\n1,3").unwrap();
        std::fs::write(dir.path().join("cfg.json"), TOY.replace("\"bins\": 2}", "\"bins\": 2, \"gamma\": 2.0}"))
            .unwrap();
        dir
    }

    #[test]
    fn worked_example_end_to_end() {
        let dir = toy_dir();
        let cfg = ExperimentConfig::load(dir.path().join("cfg.json")).unwrap();
        let out = run_experiment(&cfg, None).unwrap();
        assert!((out.theta[(0, 0)] - 5.0 / 3.0).abs() < 1e-6);
        assert!((out.theta[(0, 1)] - 7.0 / 3.0).abs() < 1e-6);
        assert_eq!(out.w.get(0, 1), 2.0);
    }

    #[test]
    fn baselines_on_toy() {
        let dir = toy_dir();
        let cfg = ExperimentConfig::load(dir.path().join("cfg.json")).unwrap();
        let sep = run_experiment(&cfg, Some(&ModelSpec::Separate)).unwrap();
        assert!(sep.w.as_matrix().iter().all(|&v| v == 0.0));
        assert!((sep.theta[(0, 0)] - 1.0).abs() < 1e-6);
        let common = run_experiment(&cfg, Some(&ModelSpec::Common)).unwrap();
        assert_eq!(common.theta.column(0), common.theta.column(1));
        let ent = run_experiment(&cfg, Some(&ModelSpec::Entropy { sigma2: 1.0 })).unwrap();
        assert!(ent.w.get(0, 1) > 0.0);
    }

    #[test]
    fn schema_errors_report_the_field() {
        let bad = TOY.replace("\"least_squares\"", "\"cubic\"");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "loss.family"),
            other => panic!("{other:?}"),
        }
        let bad = TOY.replace("\"bins\": 2", "\"bins\": 2, \"colour\": 1");
        match ExperimentConfig::from_json(&bad) {
            Err(Error::Config { path, .. }) => assert!(path.starts_with("dataset.strata"), "{path}"),
            other => panic!("{other:?}"),
        }
        let bad = TOY.replace("\"bins\": 2", "\"bins\": 0");
        assert!(matches!(ExperimentConfig::from_json(&bad), Err(Error::Config { .. })));
    }
}
