use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jointlap::experiment::{parse_json, run_cv, run_on_dataset, load_dataset, ExperimentConfig, ModelSpec, RunOutput};
use jointlap::graph::write_matrix_csv;
use jointlap::sensitivity::{run_sensitivity, StarExperimentConfig};
use jointlap::Error;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "jointlap", version, about = "Stratified models with a jointly learned Laplacian graph")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the config's model and write W, theta, trace and metrics.
    Fit(Common),
    /// Fit the config's model, which must be one of the baseline methods.
    Baseline(Common),
    /// Cross-validate the config's `cv.grid`.
    Cv(Common),
    /// Run the star-graph sensitivity study; exits nonzero on a counterexample.
    Sensitivity(Common),
    /// Fit joint, common, separate and any listed baselines, and compare.
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    quiet: bool,
}

/// Failure with the pipeline stage it happened in.
struct Failure {
    stage: &'static str,
    error: Error,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T> Stage<T> for jointlap::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|error| Failure { stage, error })
    }
}

impl Failure {
    fn to_json(&self) -> Value {
        let context = match &self.error {
            Error::Config { path, .. } => json!({ "field": path }),
            Error::Diverged { iter, previous, current } => {
                json!({ "iteration": iter, "previous": previous, "current": current })
            }
            Error::NonFinite { what, iter } => json!({ "what": what, "iteration": iter }),
            Error::InvalidWeights { row, col, .. } => json!({ "row": row, "col": col }),
            _ => json!({}),
        };
        json!({ "stage": self.stage, "message": self.error.to_string(), "context": context })
    }
}

/// Output files, held in memory until the whole command succeeded.
#[derive(Default)]
struct Artifacts(Vec<(&'static str, Vec<u8>)>);

impl Artifacts {
    fn add(&mut self, name: &'static str, bytes: Vec<u8>) {
        self.0.push((name, bytes));
    }

    fn add_json(&mut self, name: &'static str, v: &impl serde::Serialize) -> Result<(), Failure> {
        let mut bytes = serde_json::to_vec_pretty(v).map_err(Error::from).stage("write")?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    fn write(self, dir: &Path) -> Result<(), Failure> {
        fs::create_dir_all(dir).map_err(Error::from).stage("write")?;
        for (name, bytes) in self.0 {
            fs::write(dir.join(name), bytes).map_err(Error::from).stage("write")?;
        }
        Ok(())
    }
}

fn load_experiment(args: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(&args.config).stage("config")?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn fit_artifacts(out: &RunOutput) -> Result<Artifacts, Failure> {
    let mut a = Artifacts::default();
    let mut buf = Vec::new();
    out.w.write_csv(&mut buf).stage("write")?;
    a.add("W.csv", buf);
    let mut buf = Vec::new();
    write_matrix_csv(&out.theta, &mut buf).stage("write")?;
    a.add("theta.csv", buf);
    let mut buf = Vec::new();
    if let Some(t) = &out.trace {
        t.write_csv(&mut buf).stage("write")?;
    }
    a.add("trace.csv", buf);
    let summary = json!({
        "model": out.model,
        "alpha": out.alpha,
        "termination": out.trace.as_ref().map(|t| format!("{:?}", t.termination).to_lowercase()),
        "iterations": out.trace.as_ref().map(|t| t.records.len()),
        "final_objective": out.trace.as_ref().map(|t| t.final_objective()),
        "metrics": out.metrics,
        "warnings": out.warnings,
    });
    a.add_json("metrics.json", &summary)?;
    Ok(a)
}

fn fit(args: &Common, baseline_only: bool) -> Result<(), Failure> {
    let cfg = load_experiment(args)?;
    if baseline_only && matches!(cfg.model, ModelSpec::Joint) {
        return Err(Failure {
            stage: "config",
            error: Error::config("model.kind", "`joint` is not a baseline; use the fit subcommand"),
        });
    }
    let ds = load_dataset(&cfg).stage("data")?;
    let out = run_on_dataset(&cfg, &ds, None).stage("solve")?;
    for w in &out.warnings {
        log::warn!("{w}");
    }
    fit_artifacts(&out)?.write(&args.out)
}

fn cv(args: &Common) -> Result<(), Failure> {
    let cfg = load_experiment(args)?;
    if cfg.cv.is_none() {
        return Err(Failure { stage: "config", error: Error::config("cv", "missing `cv` section") });
    }
    let result = run_cv(&cfg).stage("solve")?;
    log::info!("best cell {} with mean score {}", result.best_index, result.cells[result.best_index].mean);
    let mut a = Artifacts::default();
    a.add_json("cv.json", &result)?;
    a.write(&args.out)
}

fn report(args: &Common) -> Result<(), Failure> {
    let cfg = load_experiment(args)?;
    let ds = load_dataset(&cfg).stage("data")?;
    let mut methods = vec![ModelSpec::Common, ModelSpec::Separate, ModelSpec::Joint];
    for m in std::iter::once(&cfg.model).chain(&cfg.baselines) {
        if !methods.contains(m) {
            methods.push(m.clone());
        }
    }
    let mut table = Vec::new();
    let mut csv = String::from("method,split,n,error_pct,anll,auc,f1,pinball,mse\n");
    for m in &methods {
        log::info!("fitting {}", m.name());
        let out = run_on_dataset(&cfg, &ds, Some(m)).stage("solve")?;
        let splits = [("train", Some(&out.metrics.train)), ("val", out.metrics.val.as_ref()), ("test", out.metrics.test.as_ref())];
        for (split, sm) in splits {
            let Some(sm) = sm else { continue };
            let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
            csv.push_str(&format!(
                "{},{split},{},{},{},{},{},{},{}\n",
                m.name(),
                sm.n,
                f(sm.error_pct),
                f(sm.anll),
                f(sm.auc),
                f(sm.f1),
                f(sm.pinball),
                f(sm.mse)
            ));
        }
        table.push(json!({ "method": m.name(), "alpha": out.alpha, "metrics": out.metrics, "warnings": out.warnings }));
    }
    let mut a = Artifacts::default();
    a.add_json("report.json", &table)?;
    a.add("report.csv", csv.into_bytes());
    a.write(&args.out)
}

fn sensitivity(args: &Common) -> Result<bool, Failure> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Error::config("", format!("cannot read {}: {e}", args.config.display())))
        .stage("config")?;
    let mut cfg: StarExperimentConfig = parse_json(&text).stage("config")?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate().stage("config")?;
    let report = run_sensitivity(&cfg).stage("solve")?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf).stage("write")?;
    let mut a = Artifacts::default();
    a.add("sweep.csv", buf);
    a.add_json("summary.json", &json!({ "passed": report.passed(), "profiles": report.profiles }))?;
    a.write(&args.out)?;
    for p in &report.profiles {
        for c in &p.falsification.counterexamples {
            log::error!("{}: counterexample {c:?}", p.profile);
        }
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Fit(c) | Command::Baseline(c) | Command::Cv(c) | Command::Sensitivity(c) | Command::Report(c) => c,
    };
    let level = if common.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match &cli.command {
        Command::Fit(c) => fit(c, false).map(|_| true),
        Command::Baseline(c) => fit(c, true).map(|_| true),
        Command::Cv(c) => cv(c).map(|_| true),
        Command::Sensitivity(c) => sensitivity(c),
        Command::Report(c) => report(c).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", json!({ "stage": "falsification", "message": "counterexample to the sensitivity bound found", "context": {} }));
            ExitCode::from(1)
        }
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(2)
        }
    }
}
