//! `spatial-gee`: fit pooled QMLE and spatial GEE models, run Monte Carlo
//! tables and draw synthetic datasets.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use spatial_gee::data::DistanceMetric;
use spatial_gee::kernel::KernelKind;
use spatial_gee::pipeline::{FamilyChoice, RhoEstimator, WorkingModel};
use spatial_gee::working::RhoPairs;

use config::{Column, Command, RunConfig};

#[derive(Parser)]
#[command(
    name = "spatial-gee",
    version,
    about = "Two-step spatial GEE for count and binary data"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Estimate OLS, pooled QMLE and GEE columns on a CSV file.
    Fit(FitArgs),
    /// Run a Monte Carlo table for one simulation design.
    Mc(McArgs),
    /// Write one simulated dataset and a metadata sidecar.
    Simulate(SimArgs),
}

fn parse_kernel(s: &str) -> Result<KernelKind, String> {
    match s {
        "bartlett" => Ok(KernelKind::Bartlett),
        "truncation" => Ok(KernelKind::Truncation),
        _ => Err(format!("unknown kernel `{s}`; valid kernels: bartlett, truncation")),
    }
}

fn parse_metric(s: &str) -> Result<DistanceMetric, String> {
    match s {
        "euclidean" => Ok(DistanceMetric::Euclidean),
        "haversine-km" => Ok(DistanceMetric::HaversineKm),
        _ => Err(format!("unknown metric `{s}`; valid metrics: euclidean, haversine-km")),
    }
}

fn parse_pairs(s: &str) -> Result<RhoPairs, String> {
    match s {
        "within" => Ok(RhoPairs::Within),
        "all" => Ok(RhoPairs::All),
        _ => Err(format!("unknown pair set `{s}`; valid: within, all")),
    }
}

#[derive(Args)]
struct Shared {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Estimators, comma separated (e.g. ols,pqmle-poisson,gee-poisson).
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<Column>>,
    #[arg(long)]
    working: Option<WorkingModel>,
    #[arg(long)]
    rho_estimator: Option<RhoEstimator>,
    #[arg(long, value_parser = parse_pairs)]
    rho_pairs: Option<RhoPairs>,
    #[arg(long)]
    nb2_exponent: Option<u8>,
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<KernelKind>,
    /// Kernel bandwidth; defaults to 1.5 x the median nearest-neighbour group distance.
    #[arg(long)]
    bandwidth: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap for the pooled QMLE step.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Iteration cap for the GEE step.
    #[arg(long)]
    gee_max_iter: Option<usize>,
    /// CSV output path (stdout when omitted).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write the resolved configuration as TOML to this path.
    #[arg(long)]
    save_config: Option<PathBuf>,
}

impl Shared {
    fn overlay(self) -> RunConfig {
        RunConfig {
            estimators: self.estimators,
            working: self.working,
            rho_estimator: self.rho_estimator,
            rho_pairs: self.rho_pairs,
            nb2_exponent: self.nb2_exponent,
            kernel: self.kernel,
            bandwidth: self.bandwidth,
            tol: self.tol,
            max_iter: self.max_iter,
            gee_max_iter: self.gee_max_iter,
            output: self.output,
            report: self.report,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    response: Option<String>,
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Append a constant column.
    #[arg(long)]
    intercept: bool,
    /// The two coordinate columns, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    coords: Option<Vec<String>>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<DistanceMetric>,
    #[arg(long)]
    group_column: Option<String>,
    /// Group a row-major square lattice into tiles of this many cells.
    #[arg(long)]
    group_blocks: Option<usize>,
    #[arg(long)]
    family: Option<FamilyChoice>,
}

#[derive(Args)]
struct DesignArgs {
    /// count1, count2, count3, probit1 or probit2 (`simulate` also takes fdi).
    #[arg(long)]
    case: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Count case 2: apply rho on top of the rho/(6d) weights.
    #[arg(long)]
    case2_double_rho: bool,
    #[arg(long)]
    seed: Option<u64>,
}

impl DesignArgs {
    fn overlay(self, cfg: RunConfig) -> RunConfig {
        RunConfig {
            case: self.case,
            rho: self.rho,
            side: self.side,
            threshold: self.threshold,
            case2_double_rho: self.case2_double_rho.then_some(true),
            seed: self.seed,
            ..cfg
        }
    }
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    shared: Shared,
    #[command(flatten)]
    design: DesignArgs,
    #[arg(long)]
    reps: Option<usize>,
    /// Worker threads (capped by SPATIAL_GEE_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// Skip robust standard errors.
    #[arg(long)]
    no_se: bool,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    save_config: Option<PathBuf>,
    #[command(flatten)]
    design: DesignArgs,
    /// Replication stream to draw.
    #[arg(long)]
    rep: Option<u64>,
    /// Dataset CSV path; metadata goes to `<output>.meta.json`.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn build(sub: Sub) -> anyhow::Result<(Command, RunConfig)> {
    let (command, file, save, flags) = match sub {
        Sub::Fit(a) => {
            let file = a.shared.config.clone();
            let save = a.shared.save_config.clone();
            let coords = match a.coords {
                Some(c) if c.len() == 2 => Some([c[0].clone(), c[1].clone()]),
                Some(c) => anyhow::bail!("--coords needs exactly two column names, got {}", c.len()),
                None => None,
            };
            let flags = RunConfig {
                input: a.input,
                response: a.response,
                covariates: a.covariates,
                intercept: a.intercept.then_some(true),
                coords,
                metric: a.metric,
                group_column: a.group_column,
                group_blocks: a.group_blocks,
                family: a.family,
                ..a.shared.overlay()
            };
            (Command::Fit, file, save, flags)
        }
        Sub::Mc(a) => {
            let file = a.shared.config.clone();
            let save = a.shared.save_config.clone();
            let base = RunConfig {
                reps: a.reps,
                threads: a.threads,
                compute_se: a.no_se.then_some(false),
                ..a.shared.overlay()
            };
            (Command::Mc, file, save, a.design.overlay(base))
        }
        Sub::Simulate(a) => {
            let base = RunConfig {
                rep: a.rep,
                output: a.output,
                ..Default::default()
            };
            (Command::Simulate, a.config, a.save_config, a.design.overlay(base))
        }
    };
    let base = match file {
        Some(path) => RunConfig::load(&path)?,
        None => RunConfig::default(),
    };
    let cfg = base.merge(flags).resolve(command)?;
    if let Some(path) = save {
        std::fs::write(&path, cfg.to_toml()?).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok((command, cfg))
}

fn run(sub: Sub) -> anyhow::Result<u8> {
    let (command, cfg) = build(sub)?;
    match command {
        Command::Fit => commands::fit(&cfg),
        Command::Mc => commands::mc(&cfg),
        Command::Simulate => commands::simulate(&cfg),
    }
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
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
