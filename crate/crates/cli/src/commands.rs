//! The three subcommands. Each returns the process exit code on success.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use spatial_gee::data::{block_grouping, load_csv, Dataset};
use spatial_gee::kernel::KernelSpec;
use spatial_gee::montecarlo::{run_monte_carlo, McConfig};
use spatial_gee::pipeline::{EstimatorFit, FitSession};
use spatial_gee::pqmle::ols_loglinear;
use spatial_gee::sim::{gen_fdi_like, rep_rng, PreparedDgp, FDI_BETA, FDI_COVARIATES};
use spatial_gee::special::norm_cdf;
use spatial_gee::working::{SpatialParams, WeightMode};
use spatial_gee::Error;

use crate::config::{Column, Grouping, RunConfig};

pub const REPORT_VERSION: &str = "1.0";

pub const EXIT_OK: u8 = 0;
pub const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Debug, Serialize)]
struct CoefRow {
    name: String,
    estimate: f64,
    se: Option<f64>,
    z: Option<f64>,
    p: Option<f64>,
}

#[derive(Debug, Default, Serialize)]
struct Diagnostics {
    iterations: Option<usize>,
    score_norm: Option<f64>,
    loglik: Option<f64>,
    weight_mode: Option<WeightMode>,
    weight_repairs: usize,
    separation: bool,
    n_used: usize,
    n_dropped: usize,
    error: Option<String>,
}

#[derive(Debug, Serialize)]
struct ColumnReport {
    estimator: String,
    label: String,
    converged: bool,
    coefficients: Vec<CoefRow>,
    spatial_params: Option<SpatialParams>,
    kernel: Option<KernelSpec>,
    diagnostics: Diagnostics,
}

#[derive(Debug, Serialize)]
struct FitReport<'a> {
    version: &'static str,
    command: &'static str,
    n: usize,
    groups: usize,
    dropped_missing_response: usize,
    response: String,
    columns: Vec<ColumnReport>,
    config: &'a RunConfig,
}

fn coef_rows(names: &[String], beta: &[f64], se: Option<&[f64]>) -> Vec<CoefRow> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let se = se.map(|s| s[j]);
            let z = se.map(|s| beta[j] / s);
            CoefRow {
                name: name.clone(),
                estimate: beta[j],
                se,
                z,
                p: z.map(|z| 2.0 * norm_cdf(-z.abs())),
            }
        })
        .collect()
}

fn estimator_column(col: Column, fit: EstimatorFit, ds: &Dataset) -> ColumnReport {
    let beta: Vec<f64> = fit.beta.iter().copied().collect();
    let se: Option<Vec<f64>> = fit.se.as_ref().map(|s| s.iter().copied().collect());
    ColumnReport {
        estimator: col.to_string(),
        label: col.label().into(),
        converged: fit.converged,
        coefficients: coef_rows(ds.covariate_names(), &beta, se.as_deref()),
        spatial_params: fit.spatial,
        kernel: fit.kernel,
        diagnostics: Diagnostics {
            iterations: Some(fit.iterations),
            score_norm: Some(fit.score_norm),
            loglik: fit.loglik,
            weight_mode: fit.weight_mode,
            weight_repairs: fit.weight_repairs,
            separation: fit.separation,
            n_used: ds.n(),
            ..Default::default()
        },
    }
}

fn failed_column(col: Column, err: &Error) -> ColumnReport {
    ColumnReport {
        estimator: col.to_string(),
        label: col.label().into(),
        converged: false,
        coefficients: Vec::new(),
        spatial_params: None,
        kernel: None,
        diagnostics: Diagnostics {
            error: Some(err.to_string()),
            ..Default::default()
        },
    }
}

fn open_out(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut out = open_out(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush().with_context(|| format!("cannot write {}", path.display()))
}

fn with_extension(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, usize)> {
    let input = cfg.input.as_ref().expect("resolved fit config has an input");
    let loaded = load_csv(input, &cfg.schema())?;
    let ds = match cfg.grouping() {
        Grouping::Blocks(b) => {
            let n = loaded.dataset.n();
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n {
                bail!("group_blocks needs a square lattice in row-major order; {n} rows is not a square");
            }
            loaded.dataset.regrouped(block_grouping(side, b)?)?
        }
        Grouping::Column(_) | Grouping::Singletons => loaded.dataset,
    };
    Ok((ds, loaded.dropped_missing_response))
}

/// Data or configuration problems abort the command; numerical failures of
/// one estimator are reported in its column.
fn is_estimation_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NotConverged(_)
            | Error::Divergence(_)
            | Error::Singular(_)
            | Error::Overflow { .. }
            | Error::MeanOutOfRange { .. }
            | Error::BadlyConditioned { .. }
    )
}

pub fn fit(cfg: &RunConfig) -> Result<u8> {
    let (ds, dropped) = load_dataset(cfg)?;
    let mut session = FitSession::new(&ds, cfg.settings());
    let mut columns = Vec::new();
    for &col in cfg.estimators.as_deref().unwrap_or_default() {
        let report = match col {
            Column::Ols => {
                let ols = ols_loglinear(&ds)?;
                let beta: Vec<f64> = ols.beta.iter().copied().collect();
                let se: Vec<f64> = ols.se_robust.iter().copied().collect();
                ColumnReport {
                    estimator: col.to_string(),
                    label: col.label().into(),
                    converged: true,
                    coefficients: coef_rows(ds.covariate_names(), &beta, Some(&se)),
                    spatial_params: None,
                    kernel: None,
                    diagnostics: Diagnostics {
                        n_used: ols.n_used,
                        n_dropped: ols.n_dropped,
                        ..Default::default()
                    },
                }
            }
            Column::Estimator(id) => match session.fit(id, true) {
                Ok(f) => estimator_column(col, f, &ds),
                Err(e) if is_estimation_failure(&e) => {
                    log::warn!("{id}: {e}");
                    failed_column(col, &e)
                }
                Err(e) => return Err(e).with_context(|| format!("estimator {id}")),
            },
        };
        columns.push(report);
    }
    let all_converged = columns.iter().all(|c| c.converged);
    for c in columns.iter().filter(|c| !c.converged) {
        eprintln!("warning: {} did not converge", c.label);
    }

    match &cfg.output {
        Some(path) => write_table(&columns, ds.n(), open_out(path)?)?,
        None => write_table(&columns, ds.n(), std::io::stdout().lock())?,
    }
    let report_path = cfg
        .report
        .clone()
        .or_else(|| cfg.output.as_ref().map(|p| with_extension(p, ".json")));
    if let Some(path) = report_path {
        let report = FitReport {
            version: REPORT_VERSION,
            command: "fit",
            n: ds.n(),
            groups: ds.n_groups(),
            dropped_missing_response: dropped,
            response: ds.response_name().to_string(),
            columns,
            config: cfg,
        };
        write_json(&path, &report)?;
    }
    Ok(if all_converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

/// Coefficient table: (variable, statistic) rows, one column per estimator.
fn write_table<W: Write>(columns: &[ColumnReport], n: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["variable".to_string(), "stat".to_string()];
    header.extend(columns.iter().map(|c| c.label.clone()));
    w.write_record(&header)?;
    let names: Vec<String> = columns
        .iter()
        .find(|c| !c.coefficients.is_empty())
        .map(|c| c.coefficients.iter().map(|r| r.name.clone()).collect())
        .unwrap_or_default();
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (j, name) in names.iter().enumerate() {
        let stats: [(&str, fn(&CoefRow) -> Option<f64>); 4] = [
            ("coef", |r| Some(r.estimate)),
            ("se", |r| r.se),
            ("z", |r| r.z),
            ("p", |r| r.p),
        ];
        for (stat, get) in stats {
            let mut row = vec![name.clone(), stat.to_string()];
            row.extend(columns.iter().map(|c| fmt(c.coefficients.get(j).and_then(get))));
            w.write_record(&row)?;
        }
    }
    let mut row = vec!["N".to_string(), String::new()];
    row.extend(columns.iter().map(|c| {
        if c.diagnostics.n_used > 0 {
            c.diagnostics.n_used.to_string()
        } else {
            n.to_string()
        }
    }));
    w.write_record(&row)?;
    let mut row = vec!["converged".to_string(), String::new()];
    row.extend(columns.iter().map(|c| c.converged.to_string()));
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct McReport<'a> {
    version: &'static str,
    command: &'static str,
    summary: &'a spatial_gee::montecarlo::McSummary,
    config: &'a RunConfig,
}

pub fn mc(cfg: &RunConfig) -> Result<u8> {
    let dgp = cfg.dgp()?.context("mc needs a lattice design")?;
    let ids = cfg
        .estimators
        .as_deref()
        .unwrap_or_default()
        .iter()
        .filter_map(|c| match c {
            Column::Estimator(id) => Some(*id),
            Column::Ols => None,
        })
        .collect();
    let mut mc = McConfig::new(cfg.reps.unwrap_or(500), cfg.seed.unwrap_or(42), ids);
    mc.settings = cfg.settings();
    mc.compute_se = cfg.compute_se.unwrap_or(true);
    mc.threads = cfg.effective_threads()?;
    let summary = run_monte_carlo(&mc, &dgp)?;
    match &cfg.output {
        Some(path) => summary.write_csv(open_out(path)?)?,
        None => summary.write_csv(std::io::stdout().lock())?,
    }
    if let Some(path) = &cfg.report {
        write_json(
            path,
            &McReport {
                version: REPORT_VERSION,
                command: "mc",
                summary: &summary,
                config: cfg,
            },
        )?;
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Serialize)]
struct NamedValue {
    name: String,
    value: f64,
}

#[derive(Debug, Serialize)]
struct SimulateMeta<'a> {
    version: &'static str,
    command: &'static str,
    case: &'a str,
    rho_used: Option<f64>,
    n: usize,
    groups: usize,
    beta0: Vec<NamedValue>,
    schema: spatial_gee::data::Schema,
    warnings: Vec<String>,
    config: &'a RunConfig,
}

pub fn simulate(cfg: &RunConfig) -> Result<u8> {
    let output = cfg.output.as_ref().expect("resolved simulate config has an output");
    let mut rng = rep_rng(cfg.seed.unwrap_or(42), cfg.rep.unwrap_or(0));
    let (ds, rho_used, beta0, warnings) = match cfg.dgp()? {
        None => {
            let ds = gen_fdi_like(&mut rng)?;
            let beta0 = FDI_COVARIATES.iter().zip(FDI_BETA).map(|(n, v)| NamedValue {
                name: n.to_string(),
                value: v,
            });
            (ds, None, beta0.collect::<Vec<_>>(), Vec::new())
        }
        Some(spec) => {
            let prepared = PreparedDgp::new(spec)?;
            let warnings = prepared.warnings().to_vec();
            let ds = prepared.generate(&mut rng)?;
            let beta0 = ds
                .covariate_names()
                .iter()
                .zip(spec.beta0())
                .map(|(n, v)| NamedValue {
                    name: n.clone(),
                    value: v,
                })
                .collect();
            (ds, Some(prepared.rho_used()), beta0, warnings)
        }
    };
    let schema = ds.save_csv(output)?;
    let meta = SimulateMeta {
        version: REPORT_VERSION,
        command: "simulate",
        case: cfg.case.as_deref().unwrap_or_default(),
        rho_used,
        n: ds.n(),
        groups: ds.n_groups(),
        beta0,
        schema,
        warnings,
        config: cfg,
    };
    write_json(&with_extension(output, ".meta.json"), &meta)?;
    Ok(EXIT_OK)
}
