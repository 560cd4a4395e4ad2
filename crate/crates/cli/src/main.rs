//! `frk`: simulate, fit, predict, cross-validate and evaluate fixed rank
//! kriging models.
//!
//! Exit codes: 0 success, 1 usage, 2 data or I/O, 3 numerical failure.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;
mod spec;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use frk::estimation::UpdateRule;
use frk::simulation::{DesignKind, KType};

use commands::Targets;
use config::{GroupingArg, Method, RunConfig};

/// A misuse of the command line or configuration.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "frk", version, about = "Fixed rank kriging with bandwidth estimation")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML file of run settings; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Print the resolved settings as TOML and exit.
    #[arg(long, global = true)]
    dump_config: bool,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads for replicate, fold and candidate parallelism.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate fields on the 1-D study domain.
    Simulate(SimulateArgs),
    /// Fit K, σδ² and (with AECM) the bandwidth constant b.
    Fit(FitArgs),
    /// Krige at new locations with standard errors and intervals.
    Predict(PredictArgs),
    /// k-fold cross-validated MSPE.
    Cv(CvArgs),
    /// Run the simulation study and write its metrics table.
    Evaluate(EvaluateArgs),
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected LO,HI")?;
    let a: f64 = a.trim().parse().map_err(|_| format!("bad number '{a}'"))?;
    let b: f64 = b.trim().parse().map_err(|_| format!("bad number '{b}'"))?;
    Ok((a, b))
}

fn parse_rule(s: &str) -> Result<UpdateRule, String> {
    match s {
        "restricted" => Ok(UpdateRule::Restricted),
        "marginal" => Ok(UpdateRule::Marginal),
        _ => Err(format!("unknown rule '{s}' (restricted or marginal)")),
    }
}

fn parse_ktype(s: &str) -> Result<KType, String> {
    s.parse().map_err(|e: frk::Error| e.to_string())
}

fn parse_design(s: &str) -> Result<DesignKind, String> {
    s.parse().map_err(|e: frk::Error| e.to_string())
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Knot CSV with columns res,coord1[,coord2].
    #[arg(long, value_name = "FILE", conflicts_with = "knot_grid")]
    knots: Option<PathBuf>,
    /// [BOUNDS:]COUNTS, e.g. 0.5,256.5:5 or 7,25.
    #[arg(long, value_name = "SPEC")]
    knot_grid: Option<String>,
    #[arg(long, value_name = "L")]
    resolutions: Option<usize>,
    /// euclidean or greatcircle[:radius].
    #[arg(long)]
    metric: Option<String>,
    /// Measurement-error variance (required; never estimated).
    #[arg(long, value_name = "VALUE")]
    sigma_eps2: Option<f64>,
    /// Hold the bandwidth constant fixed.
    #[arg(long, value_name = "FIXED", conflicts_with = "b_bracket")]
    b: Option<f64>,
    /// Search bracket for the bandwidth constant.
    #[arg(long, value_name = "LO,HI", value_parser = parse_pair)]
    b_bracket: Option<(f64, f64)>,
    /// Starting bandwidth constant.
    #[arg(long, value_name = "B")]
    b_init: Option<f64>,
    /// Do not prepend an intercept column.
    #[arg(long)]
    no_intercept: bool,
    /// Variance update: restricted or marginal.
    #[arg(long, value_parser = parse_rule)]
    rule: Option<UpdateRule>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relative log-likelihood tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

impl ModelArgs {
    fn apply(&self, c: &mut RunConfig) {
        set(&mut c.method, self.method);
        if let Some(p) = &self.knots {
            c.knots = Some(p.clone());
            c.knot_grid = None;
        }
        if let Some(g) = &self.knot_grid {
            c.knot_grid = Some(g.clone());
            c.knots = None;
        }
        c.resolutions = self.resolutions.or(c.resolutions);
        set(&mut c.metric, self.metric.clone());
        c.sigma_eps2 = self.sigma_eps2.or(c.sigma_eps2);
        c.b = self.b.or(c.b);
        if let Some(br) = self.b_bracket {
            c.b_bracket = br;
            c.b = None;
        }
        set(&mut c.b_init, self.b_init);
        if self.no_intercept {
            c.intercept = false;
        }
        c.rule = self.rule.or(c.rule);
        set(&mut c.max_iter, self.max_iter);
        set(&mut c.tol_loglik, self.tol);
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// M (Matérn), P (positive Wishart) or N (Wishart).
    #[arg(long, value_parser = parse_ktype)]
    k_type: Option<KType>,
    #[arg(long)]
    sigma_delta2: Option<f64>,
    #[arg(long)]
    sigma_eps2: Option<f64>,
    /// True bandwidth constant.
    #[arg(long)]
    b: Option<f64>,
    /// random or clustered.
    #[arg(long, value_parser = parse_design)]
    design: Option<DesignKind>,
    #[arg(long)]
    replicates: Option<usize>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Observation CSV.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    /// Fitted-model file to write.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Fitted-model file.
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,
    /// The observation CSV the model was fitted to.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Target CSV with coordinates and the model's covariates.
    #[arg(long, value_name = "FILE", conflicts_with = "grid")]
    targets: Option<PathBuf>,
    /// Regular target grid lo:hi:step[,lo:hi:step] (intercept-only models).
    #[arg(long, value_name = "SPEC")]
    grid: Option<String>,
    /// Prediction interval level.
    #[arg(long)]
    level: Option<f64>,
    /// Also write the trend and spatial components.
    #[arg(long)]
    decompose: bool,
    /// Treat targets within this radius of an observation as that observation.
    #[arg(long, value_name = "RADIUS")]
    snap: Option<f64>,
    /// Prediction CSV to write.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_name = "K")]
    folds: Option<usize>,
    /// Report CSV to write (stdout if omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_ktype)]
    k_types: Option<Vec<KType>>,
    /// Measurement-error variances of the grid.
    #[arg(long, value_delimiter = ',')]
    sigma_eps2: Option<Vec<f64>>,
    /// True bandwidth constants of the grid.
    #[arg(long, value_delimiter = ',')]
    b: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    sigma_delta2: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_design)]
    designs: Option<Vec<DesignKind>>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, value_enum)]
    grouping: Option<GroupingArg>,
    /// Update rule for the study fits: restricted or marginal.
    #[arg(long, value_parser = parse_rule)]
    rule: Option<UpdateRule>,
    /// Metrics CSV to write (stdout if omitted).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| UsageError(format!("{flag} is required")).into())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    set(&mut cfg.seed, cli.global.seed);
    cfg.threads = cli.global.threads.or(cfg.threads);
    match &cli.command {
        Command::Simulate(a) => {
            set(&mut cfg.k_type, a.k_type);
            set(&mut cfg.sigma_delta2, a.sigma_delta2);
            cfg.sigma_eps2 = a.sigma_eps2.or(cfg.sigma_eps2);
            cfg.b = a.b.or(cfg.b);
            set(&mut cfg.design, a.design);
            cfg.replicates = a.replicates.or(cfg.replicates);
        }
        Command::Fit(a) => a.model.apply(&mut cfg),
        Command::Predict(a) => {
            set(&mut cfg.level, a.level);
            cfg.decompose |= a.decompose;
            cfg.snap = a.snap.or(cfg.snap);
        }
        Command::Cv(a) => {
            a.model.apply(&mut cfg);
            set(&mut cfg.folds, a.folds);
        }
        Command::Evaluate(a) => {
            set(&mut cfg.k_types, a.k_types.clone());
            set(&mut cfg.sigma_eps2_levels, a.sigma_eps2.clone());
            set(&mut cfg.b_levels, a.b.clone());
            set(&mut cfg.sigma_delta2_levels, a.sigma_delta2.clone());
            set(&mut cfg.designs, a.designs.clone());
            cfg.replicates = a.replicates.or(cfg.replicates);
            set(&mut cfg.grouping, a.grouping);
            cfg.rule = a.rule.or(cfg.rule);
        }
    }
    if cli.global.dump_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    if let Some(n) = cfg.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match &cli.command {
        Command::Simulate(a) => commands::simulate(&cfg, need(&a.out, "--out")?),
        Command::Fit(a) => commands::fit(&cfg, need(&a.data, "--data")?, need(&a.out, "--out")?),
        Command::Predict(a) => {
            let targets = match (&a.targets, &a.grid) {
                (Some(p), _) => Targets::File(p),
                (None, Some(g)) => Targets::Grid(g),
                (None, None) => return Err(UsageError("one of --targets or --grid is required".into()).into()),
            };
            commands::predict(
                &cfg,
                need(&a.model, "--model")?,
                need(&a.data, "--data")?,
                targets,
                need(&a.out, "--out")?,
            )
        }
        Command::Cv(a) => commands::cv(&cfg, need(&a.data, "--data")?, a.out.as_deref()),
        Command::Evaluate(a) => commands::evaluate(&cfg, a.out.as_deref()),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<frk::Error>().map(frk::Error::kind) {
        Some(frk::ErrorKind::Usage) => 1,
        Some(frk::ErrorKind::Numerical) => 3,
        _ => 2,
    }
}

/// The error chain joined with ": ", skipping causes whose text the
/// previous message already includes.
fn message(e: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if parts.last().is_none_or(|p| !p.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
