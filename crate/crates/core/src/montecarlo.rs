//! Replicated experiments over the simulation designs.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{EstimatorId, EstimatorSettings, FitSession};
use crate::sim::{rep_rng, DgpSpec, PreparedDgp};

/// Share of failed replications above which a summary is flagged.
pub const NONCONVERGENCE_FLAG_RATE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub reps: usize,
    pub seed: u64,
    pub estimators: Vec<EstimatorId>,
    #[serde(default)]
    pub settings: EstimatorSettings,
    /// Also compute robust s.e. in every replication.
    #[serde(default = "default_true")]
    pub compute_se: bool,
    /// Worker threads; `None` lets rayon decide.
    #[serde(default)]
    pub threads: Option<usize>,
}

fn default_true() -> bool {
    true
}

impl McConfig {
    pub fn new(reps: usize, seed: u64, estimators: Vec<EstimatorId>) -> Self {
        McConfig {
            reps,
            seed,
            estimators,
            settings: EstimatorSettings::default(),
            compute_se: true,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Monte Carlo s.e. of `mean`.
    pub mc_se_mean: f64,
    /// Monte Carlo s.e. of `sd` (normal approximation).
    pub mc_se_sd: f64,
    /// Average reported robust s.e.; NaN when s.e. were not computed.
    pub mean_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorSummary {
    pub estimator: EstimatorId,
    pub converged: usize,
    pub failed: usize,
    pub coefficients: Vec<CoefSummary>,
    pub single_rep: bool,
    pub high_nonconvergence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McSummary {
    pub dgp: DgpSpec,
    pub rho_used: f64,
    pub n: usize,
    pub groups: usize,
    pub reps: usize,
    pub seed: u64,
    pub beta0: [f64; 4],
    pub estimators: Vec<EstimatorSummary>,
    pub warnings: Vec<String>,
}

type RepOutcome = Vec<Option<(Vec<f64>, Option<Vec<f64>>)>>;

fn run_rep(dgp: &PreparedDgp, cfg: &McConfig, rep: usize) -> RepOutcome {
    let mut rng = rep_rng(cfg.seed, rep as u64);
    let ds = match dgp.generate(&mut rng) {
        Ok(ds) => ds,
        Err(e) => {
            log::debug!("replication {rep}: generation failed: {e}");
            return vec![None; cfg.estimators.len()];
        }
    };
    let mut session = FitSession::new(&ds, cfg.settings);
    cfg.estimators
        .iter()
        .map(|&id| match session.fit(id, cfg.compute_se) {
            Ok(fit) if fit.converged => {
                let se = fit.se.map(|s| s.iter().cloned().collect());
                Some((fit.beta.iter().cloned().collect(), se))
            }
            Ok(_) => None,
            Err(e) => {
                log::debug!("replication {rep}: {id} failed: {e}");
                None
            }
        })
        .collect()
}

fn summarize(
    id: EstimatorId,
    names: &[String],
    draws: &[&(Vec<f64>, Option<Vec<f64>>)],
    reps: usize,
) -> EstimatorSummary {
    let k = draws.len();
    let coefficients = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            if k == 0 {
                return CoefSummary {
                    name: name.clone(),
                    mean: f64::NAN,
                    sd: f64::NAN,
                    mc_se_mean: f64::NAN,
                    mc_se_sd: f64::NAN,
                    mean_se: f64::NAN,
                };
            }
            let kf = k as f64;
            let mean = draws.iter().map(|d| d.0[j]).sum::<f64>() / kf;
            let sd = if k > 1 {
                (draws.iter().map(|d| (d.0[j] - mean).powi(2)).sum::<f64>() / (kf - 1.0)).sqrt()
            } else {
                0.0
            };
            let (mc_se_mean, mc_se_sd) = if k > 1 {
                (sd / kf.sqrt(), sd / (2.0 * (kf - 1.0)).sqrt())
            } else {
                (0.0, 0.0)
            };
            let mean_se = if draws.iter().all(|d| d.1.is_some()) {
                draws.iter().map(|d| d.1.as_ref().unwrap()[j]).sum::<f64>() / kf
            } else {
                f64::NAN
            };
            CoefSummary {
                name: name.clone(),
                mean,
                sd,
                mc_se_mean,
                mc_se_sd,
                mean_se,
            }
        })
        .collect();
    let failed = reps - k;
    EstimatorSummary {
        estimator: id,
        converged: k,
        failed,
        coefficients,
        single_rep: reps == 1,
        high_nonconvergence: failed as f64 > NONCONVERGENCE_FLAG_RATE * reps as f64,
    }
}

/// Runs `cfg.reps` replications of `dgp`. Replication r draws from stream r
/// of the seeded generator and results are reduced in replication order, so
/// the summary does not depend on the thread count.
pub fn run_monte_carlo(cfg: &McConfig, dgp: &DgpSpec) -> Result<McSummary> {
    if cfg.reps == 0 {
        return Err(Error::InvalidArgument("reps must be at least 1".into()));
    }
    if cfg.estimators.is_empty() {
        return Err(Error::InvalidArgument("no estimators requested".into()));
    }
    if let Some(bad) = cfg
        .estimators
        .iter()
        .find(|e| e.family.is_count() != dgp.case.is_count())
    {
        return Err(Error::InvalidArgument(format!(
            "estimator {bad} does not fit the {} design",
            dgp.case
        )));
    }
    let prepared = PreparedDgp::new(*dgp)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cfg.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<RepOutcome> = pool.install(|| {
        (0..cfg.reps)
            .into_par_iter()
            .map(|r| run_rep(&prepared, cfg, r))
            .collect()
    });

    let names: Vec<String> = ["const", "x2", "x3", "x4"].iter().map(|s| s.to_string()).collect();
    let estimators = cfg
        .estimators
        .iter()
        .enumerate()
        .map(|(e, &id)| {
            let draws: Vec<_> = outcomes.iter().filter_map(|o| o[e].as_ref()).collect();
            summarize(id, &names, &draws, cfg.reps)
        })
        .collect::<Vec<_>>();
    let mut warnings = prepared.warnings().to_vec();
    for s in &estimators {
        if s.high_nonconvergence {
            let w = format!("{}: {} of {} replications failed", s.estimator, s.failed, cfg.reps);
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    let lattice = prepared.lattice();
    Ok(McSummary {
        dgp: *dgp,
        rho_used: prepared.rho_used(),
        n: lattice.n(),
        groups: lattice.n_groups(),
        reps: cfg.reps,
        seed: cfg.seed,
        beta0: dgp.beta0(),
        estimators,
        warnings,
    })
}

impl McSummary {
    pub fn estimator(&self, id: EstimatorId) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.estimator == id)
    }

    /// Table layout: one row per (coefficient, statistic), one column per
    /// estimator.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let io = |e: csv::Error| Error::InvalidArgument(format!("writing table: {e}"));
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["rho".to_string(), "row".to_string()];
        header.extend(self.estimators.iter().map(|e| e.estimator.label().to_string()));
        w.write_record(&header).map_err(io)?;
        let rho = self.dgp.rho.to_string();
        let stats: [(&str, fn(&CoefSummary) -> f64); 5] = [
            ("mean", |c| c.mean),
            ("sd", |c| c.sd),
            ("mc_se_mean", |c| c.mc_se_mean),
            ("mc_se_sd", |c| c.mc_se_sd),
            ("mean_se", |c| c.mean_se),
        ];
        let n_coef = self.estimators[0].coefficients.len();
        for j in 0..n_coef {
            let name = &self.estimators[0].coefficients[j].name;
            for (stat, get) in &stats {
                let mut row = vec![rho.clone(), format!("{stat}({name})")];
                row.extend(self.estimators.iter().map(|e| get(&e.coefficients[j]).to_string()));
                w.write_record(&row).map_err(io)?;
            }
        }
        let mut row = vec![rho.clone(), "converged".to_string()];
        row.extend(self.estimators.iter().map(|e| e.converged.to_string()));
        w.write_record(&row).map_err(io)?;
        let mut row = vec![rho.clone(), "failed".to_string()];
        row.extend(self.estimators.iter().map(|e| e.failed.to_string()));
        w.write_record(&row).map_err(io)?;
        let mut row = vec![rho, "flags".to_string()];
        row.extend(self.estimators.iter().map(|e| {
            let mut f = Vec::new();
            if e.single_rep {
                f.push("single-rep");
            }
            if e.high_nonconvergence {
                f.push("high-nonconvergence");
            }
            f.join(";")
        }));
        w.write_record(&row).map_err(io)?;
        w.flush().map_err(|e| Error::Io {
            path: "<table>".into(),
            cause: e,
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::DgpCase;

    fn csv_of(s: &McSummary) -> String {
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn single_rep_flag_and_zero_sd() {
        let cfg = McConfig::new(1, 9, EstimatorId::defaults_for(true));
        let s = run_monte_carlo(&cfg, &DgpSpec::new(DgpCase::Count1, 0.0, 6)).unwrap();
        for e in &s.estimators {
            assert!(e.single_rep);
            assert!(e.coefficients.iter().all(|c| c.sd == 0.0));
        }
        assert!(csv_of(&s).contains("single-rep"));
    }

    #[test]
    fn thread_count_does_not_change_output() {
        let mut cfg = McConfig::new(12, 5, EstimatorId::defaults_for(false));
        let dgp = DgpSpec::new(DgpCase::Probit1, 0.5, 6);
        cfg.threads = Some(1);
        let a = csv_of(&run_monte_carlo(&cfg, &dgp).unwrap());
        cfg.threads = Some(4);
        let b = csv_of(&run_monte_carlo(&cfg, &dgp).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_configs() {
        let dgp = DgpSpec::new(DgpCase::Count1, 0.0, 6);
        assert!(run_monte_carlo(&McConfig::new(0, 1, EstimatorId::defaults_for(true)), &dgp).is_err());
        assert!(run_monte_carlo(&McConfig::new(2, 1, EstimatorId::defaults_for(false)), &dgp).is_err());
    }

    #[test]
    fn summary_matches_direct_replication() {
        let cfg = McConfig::new(5, 17, EstimatorId::defaults_for(true));
        let dgp = DgpSpec::new(DgpCase::Count2, 0.5, 6);
        let s = run_monte_carlo(&cfg, &dgp).unwrap();
        let prepared = PreparedDgp::new(dgp).unwrap();
        let b: Vec<f64> = (0..5)
            .map(|r| {
                let ds = prepared.generate(&mut rep_rng(17, r)).unwrap();
                FitSession::new(&ds, cfg.settings)
                    .fit(cfg.estimators[0], false)
                    .unwrap()
                    .beta[1]
            })
            .collect();
        let mean = b.iter().sum::<f64>() / 5.0;
        assert!((s.estimators[0].coefficients[1].mean - mean).abs() < 1e-12);
    }
}
