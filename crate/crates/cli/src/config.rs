//! Run configuration: one flat TOML file, overridden by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use spatial_gee::data::{DistanceMetric, Schema};
use spatial_gee::kernel::KernelKind;
use spatial_gee::pipeline::{EstimatorId, EstimatorSettings, FamilyChoice, KernelChoice, RhoEstimator, WorkingModel};
use spatial_gee::sim::{DgpCase, DgpSpec, PROBIT_THRESHOLD};
use spatial_gee::working::RhoPairs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Fit,
    Mc,
    Simulate,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Mc => "mc",
            Command::Simulate => "simulate",
        }
    }
}

/// A column of the `fit` report: log-linear OLS or one of the named estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    Ols,
    Estimator(EstimatorId),
}

impl Column {
    pub fn label(&self) -> &'static str {
        match self {
            Column::Ols => "OLS",
            Column::Estimator(id) => id.label(),
        }
    }

    /// OLS and the four count estimators, or the probit pair.
    pub fn defaults_for(family: FamilyChoice) -> Vec<Column> {
        let mut cols = Vec::new();
        if family.is_count() {
            cols.push(Column::Ols);
        }
        cols.extend(
            EstimatorId::defaults_for(family.is_count())
                .into_iter()
                .map(Column::Estimator),
        );
        cols
    }
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Column::Ols => f.write_str("ols"),
            Column::Estimator(id) => write!(f, "{id}"),
        }
    }
}

impl FromStr for Column {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ols" {
            return Ok(Column::Ols);
        }
        s.parse::<EstimatorId>().map(Column::Estimator).map_err(|_| {
            let mut valid = vec!["ols".to_string()];
            valid.extend(EstimatorId::ALL.iter().map(|e| e.to_string()));
            anyhow::anyhow!("unknown estimator `{s}`; valid estimators: {}", valid.join(", "))
        })
    }
}

impl Serialize for Column {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Column {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How rows are grouped for `fit`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grouping {
    /// Labels read from a CSV column.
    Column(String),
    /// Square tiles of this many cells on a row-major lattice.
    Blocks(usize),
    /// Every row is its own group.
    Singletons,
}

/// Every key is optional in the file; `resolve` fills in defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariates: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub intercept: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coords: Option<[String; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metric: Option<DistanceMetric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_column: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_blocks: Option<usize>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<FamilyChoice>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimators: Option<Vec<Column>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub working: Option<WorkingModel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_estimator: Option<RhoEstimator>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho_pairs: Option<RhoPairs>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nb2_exponent: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gee_max_iter: Option<usize>,

    /// DGP name for `mc`/`simulate`; `simulate` also accepts `fdi`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case2_double_rho: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reps: Option<usize>,
    /// Replication stream drawn by `simulate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rep: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compute_se: Option<bool>,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

pub const FDI_CASE: &str = "fdi";

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Fields set in `over` replace those in `self`.
    pub fn merge(self, over: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: over.$f.or(self.$f)),* } };
        }
        pick!(
            command,
            input,
            response,
            covariates,
            intercept,
            coords,
            metric,
            group_column,
            group_blocks,
            family,
            estimators,
            working,
            rho_estimator,
            rho_pairs,
            nb2_exponent,
            kernel,
            bandwidth,
            tol,
            max_iter,
            gee_max_iter,
            case,
            rho,
            side,
            threshold,
            case2_double_rho,
            reps,
            rep,
            seed,
            threads,
            compute_se,
            output,
            report
        )
    }

    /// Fills the defaults relevant to the command and checks every value.
    pub fn resolve(mut self, command: Command) -> Result<RunConfig> {
        if let Some(c) = self.command {
            if c != command {
                bail!("config file is for `{}` but `{}` was run", c.as_str(), command.as_str());
            }
        }
        self.command = Some(command);
        let s = EstimatorSettings::default();
        if let Some(h) = self.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                bail!("bandwidth must be positive, got {h}");
            }
        }
        if let Some(e) = self.nb2_exponent {
            if e != 1 && e != 2 {
                bail!("nb2_exponent must be 1 or 2, got {e}");
            }
        }
        match command {
            Command::Fit => {
                if self.input.is_none() {
                    bail!("fit needs an input file");
                }
                if self.response.is_none() {
                    bail!("fit needs a response column");
                }
                if self.coords.is_none() {
                    bail!("fit needs two coordinate columns");
                }
                if self.group_column.is_some() && self.group_blocks.is_some() {
                    bail!("group_column and group_blocks are mutually exclusive");
                }
                self.covariates.get_or_insert_with(Vec::new);
                self.intercept.get_or_insert(false);
                self.metric.get_or_insert(DistanceMetric::default());
                let family = *self.family.get_or_insert(FamilyChoice::Poisson);
                let cols = self.estimators.get_or_insert_with(|| Column::defaults_for(family));
                if cols.is_empty() {
                    bail!("no estimators requested");
                }
                for c in cols.iter() {
                    if let Column::Estimator(id) = c {
                        if id.family.is_count() != family.is_count() {
                            bail!("estimator {id} does not match family {}", family.as_str());
                        }
                    } else if !family.is_count() {
                        bail!("the log-linear OLS column needs a count response");
                    }
                }
            }
            Command::Mc | Command::Simulate => {
                let case = self.case.clone().unwrap_or_else(|| "count1".into());
                if !(command == Command::Simulate && case == FDI_CASE) {
                    let c: DgpCase = case.parse()?;
                    self.rho.get_or_insert(0.0);
                    self.side.get_or_insert(20);
                    self.threshold.get_or_insert(PROBIT_THRESHOLD);
                    self.case2_double_rho.get_or_insert(false);
                    if command == Command::Mc {
                        self.reps.get_or_insert(500);
                        self.compute_se.get_or_insert(true);
                        let ids = self.estimators.get_or_insert_with(|| {
                            EstimatorId::defaults_for(c.is_count())
                                .into_iter()
                                .map(Column::Estimator)
                                .collect()
                        });
                        if ids.is_empty() {
                            bail!("no estimators requested");
                        }
                        if ids.contains(&Column::Ols) {
                            bail!("the OLS column is only available in `fit`");
                        }
                    }
                }
                self.case = Some(case);
                self.seed.get_or_insert(42);
                if command == Command::Simulate {
                    self.rep.get_or_insert(0);
                    if self.output.is_none() {
                        bail!("simulate needs an output path");
                    }
                }
            }
        }
        if command != Command::Simulate {
            self.working.get_or_insert(s.working);
            self.rho_estimator.get_or_insert(s.rho_estimator);
            self.rho_pairs.get_or_insert(s.rho_pairs);
            self.nb2_exponent.get_or_insert(s.nb2_exponent);
            self.kernel.get_or_insert(s.kernel.kind);
            self.tol.get_or_insert(s.solver.tol);
            self.max_iter.get_or_insert(s.solver.max_iter);
            self.gee_max_iter.get_or_insert(s.solver.gee_max_iter);
        }
        if self.seed.is_some_and(|s| s > i64::MAX as u64) {
            bail!("seed must be at most {} so config files can store it", i64::MAX);
        }
        if let Some(t) = self.threads {
            if t == 0 {
                bail!("threads must be at least 1");
            }
        }
        Ok(self)
    }

    pub fn settings(&self) -> EstimatorSettings {
        let d = EstimatorSettings::default();
        let mut solver = d.solver;
        solver.tol = self.tol.unwrap_or(solver.tol);
        solver.max_iter = self.max_iter.unwrap_or(solver.max_iter);
        solver.gee_max_iter = self.gee_max_iter.unwrap_or(solver.gee_max_iter);
        EstimatorSettings {
            working: self.working.unwrap_or(d.working),
            rho_estimator: self.rho_estimator.unwrap_or(d.rho_estimator),
            rho_pairs: self.rho_pairs.unwrap_or(d.rho_pairs),
            nb2_exponent: self.nb2_exponent.unwrap_or(d.nb2_exponent),
            kernel: KernelChoice {
                kind: self.kernel.unwrap_or(d.kernel.kind),
                bandwidth: self.bandwidth,
            },
            solver,
        }
    }

    pub fn schema(&self) -> Schema {
        Schema {
            response: self.response.clone().unwrap_or_default(),
            covariates: self.covariates.clone().unwrap_or_default(),
            intercept: self.intercept.unwrap_or(false),
            coords: self.coords.clone().unwrap_or_default(),
            metric: self.metric.unwrap_or_default(),
            group: self.group_column.clone(),
        }
    }

    pub fn grouping(&self) -> Grouping {
        match (&self.group_column, self.group_blocks) {
            (Some(c), _) => Grouping::Column(c.clone()),
            (None, Some(b)) => Grouping::Blocks(b),
            (None, None) => Grouping::Singletons,
        }
    }

    /// The simulation design; `None` for the FDI-like generator.
    pub fn dgp(&self) -> Result<Option<DgpSpec>> {
        let case = self.case.as_deref().unwrap_or("count1");
        if case == FDI_CASE {
            return Ok(None);
        }
        let mut spec = DgpSpec::new(case.parse()?, self.rho.unwrap_or(0.0), self.side.unwrap_or(20));
        spec.threshold = self.threshold.unwrap_or(PROBIT_THRESHOLD);
        spec.case2_double_rho = self.case2_double_rho.unwrap_or(false);
        Ok(Some(spec))
    }

    /// Worker threads: the configured count, capped by SPATIAL_GEE_THREADS.
    pub fn effective_threads(&self) -> Result<Option<usize>> {
        let env = match std::env::var("SPATIAL_GEE_THREADS") {
            Ok(v) => {
                let t: usize = v
                    .trim()
                    .parse()
                    .with_context(|| format!("SPATIAL_GEE_THREADS must be a positive integer, got `{v}`"))?;
                if t == 0 {
                    bail!("SPATIAL_GEE_THREADS must be at least 1");
                }
                Some(t)
            }
            Err(_) => None,
        };
        Ok(match (self.threads, env) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        })
    }
}
