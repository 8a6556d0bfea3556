//! The six named estimators (pooled QMLE and GEE for Poisson, NB2 and
//! probit) with the two-step nuisance estimation wired in.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupIndex};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::gee::{default_bandwidth, gee_fit, group_sandwich, partial_effects, EffectKind, PartialEffect};
use crate::kernel::{KernelKind, KernelSpec};
use crate::pqmle::{fit_pqmle, PqmleResult, SolverOptions};
use crate::working::{
    build_weight_matrices, correlation_bracket, estimate_exchangeable_scaled, estimate_rho_direct, estimate_rho_lsq_in,
    estimate_tau2, rho_bracket, CorrelationKind, CorrelationModel, PairTarget, ResidualPairs, RhoPairs, SpatialParams,
    WeightMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Pqmle,
    Gee,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyChoice {
    Poisson,
    Nb2,
    Probit,
}

impl FamilyChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            FamilyChoice::Poisson => "poisson",
            FamilyChoice::Nb2 => "nb2",
            FamilyChoice::Probit => "probit",
        }
    }

    pub fn is_count(self) -> bool {
        !matches!(self, FamilyChoice::Probit)
    }
}

impl FromStr for FamilyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson" => Ok(FamilyChoice::Poisson),
            "nb2" => Ok(FamilyChoice::Nb2),
            "probit" => Ok(FamilyChoice::Probit),
            _ => Err(Error::InvalidArgument(format!(
                "unknown family `{s}`; valid families: poisson, nb2, probit"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EstimatorId {
    pub kind: EstimatorKind,
    pub family: FamilyChoice,
}

impl EstimatorId {
    pub const ALL: [EstimatorId; 6] = [
        EstimatorId::new(EstimatorKind::Pqmle, FamilyChoice::Poisson),
        EstimatorId::new(EstimatorKind::Gee, FamilyChoice::Poisson),
        EstimatorId::new(EstimatorKind::Pqmle, FamilyChoice::Nb2),
        EstimatorId::new(EstimatorKind::Gee, FamilyChoice::Nb2),
        EstimatorId::new(EstimatorKind::Pqmle, FamilyChoice::Probit),
        EstimatorId::new(EstimatorKind::Gee, FamilyChoice::Probit),
    ];

    pub const fn new(kind: EstimatorKind, family: FamilyChoice) -> Self {
        EstimatorId { kind, family }
    }

    /// Column heading used in result tables.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.family) {
            (EstimatorKind::Pqmle, FamilyChoice::Poisson) => "Poisson",
            (EstimatorKind::Gee, FamilyChoice::Poisson) => "GEE-poisson",
            (EstimatorKind::Pqmle, FamilyChoice::Nb2) => "NB II",
            (EstimatorKind::Gee, FamilyChoice::Nb2) => "GEE-nb2",
            (EstimatorKind::Pqmle, FamilyChoice::Probit) => "Probit",
            (EstimatorKind::Gee, FamilyChoice::Probit) => "GEE-probit",
        }
    }

    /// Default estimator set for count or binary responses.
    pub fn defaults_for(count: bool) -> Vec<EstimatorId> {
        EstimatorId::ALL
            .iter()
            .copied()
            .filter(|e| e.family.is_count() == count)
            .collect()
    }
}

impl fmt::Display for EstimatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            EstimatorKind::Pqmle => "pqmle",
            EstimatorKind::Gee => "gee",
        };
        write!(f, "{kind}-{}", self.family.as_str())
    }
}

impl FromStr for EstimatorId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorId::ALL
            .iter()
            .copied()
            .find(|e| e.to_string() == s)
            .ok_or_else(|| {
                let valid: Vec<String> = EstimatorId::ALL.iter().map(|e| e.to_string()).collect();
                Error::InvalidArgument(format!(
                    "unknown estimator `{s}`; valid estimators: {}",
                    valid.join(", ")
                ))
            })
    }
}

impl Serialize for EstimatorId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for EstimatorId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkingModel {
    Independence,
    #[default]
    Exchangeable,
    Cressie,
    Invdist,
    Expminus1,
    /// m(1 + m tau2) variances with m_l m_m tau2 c(d, rho) covariances.
    PoissonStructural,
}

impl WorkingModel {
    pub const ALL: [WorkingModel; 6] = [
        WorkingModel::Independence,
        WorkingModel::Exchangeable,
        WorkingModel::Cressie,
        WorkingModel::Invdist,
        WorkingModel::Expminus1,
        WorkingModel::PoissonStructural,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkingModel::Independence => "independence",
            WorkingModel::Exchangeable => "exchangeable",
            WorkingModel::Cressie => "cressie",
            WorkingModel::Invdist => "invdist",
            WorkingModel::Expminus1 => "expminus1",
            WorkingModel::PoissonStructural => "poisson-structural",
        }
    }

    fn distance_kind(self) -> Option<CorrelationKind> {
        match self {
            WorkingModel::Cressie => Some(CorrelationKind::CressieExp),
            WorkingModel::Invdist => Some(CorrelationKind::InverseDistance),
            WorkingModel::Expminus1 | WorkingModel::PoissonStructural => Some(CorrelationKind::ExpMinusOne),
            _ => None,
        }
    }
}

impl FromStr for WorkingModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorkingModel::ALL
            .iter()
            .copied()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<_> = WorkingModel::ALL.iter().map(|w| w.as_str()).collect();
                Error::InvalidArgument(format!(
                    "unknown working model `{s}`; valid models: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoEstimator {
    /// Closed-form average of log(u_i u_j/(m_i m_j) + 1) d_ij (count families).
    Direct,
    /// Least squares on within-group residual products.
    #[default]
    Lsq,
    /// Same criterion as `Lsq`, run through the generic nuisance fit.
    Prentice,
}

impl FromStr for RhoEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(RhoEstimator::Direct),
            "lsq" => Ok(RhoEstimator::Lsq),
            "prentice" => Ok(RhoEstimator::Prentice),
            _ => Err(Error::InvalidArgument(format!(
                "unknown rho estimator `{s}`; valid: direct, lsq, prentice"
            ))),
        }
    }
}

/// Kernel for the robust covariance; `bandwidth = None` selects 1.5 x the
/// median nearest-neighbour group distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelChoice {
    pub kind: KernelKind,
    pub bandwidth: Option<f64>,
}

impl Default for KernelChoice {
    fn default() -> Self {
        KernelChoice {
            kind: KernelKind::Bartlett,
            bandwidth: None,
        }
    }
}

impl KernelChoice {
    pub fn resolve(&self, group_distances: &DMatrix<f64>) -> Result<KernelSpec> {
        let h = match self.bandwidth {
            Some(h) => h,
            None => default_bandwidth(group_distances),
        };
        KernelSpec::new(self.kind, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub working: WorkingModel,
    pub rho_estimator: RhoEstimator,
    pub rho_pairs: RhoPairs,
    pub nb2_exponent: u8,
    pub kernel: KernelChoice,
    pub solver: SolverOptions,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            working: WorkingModel::Exchangeable,
            rho_estimator: RhoEstimator::Lsq,
            rho_pairs: RhoPairs::Within,
            nb2_exponent: 2,
            kernel: KernelChoice::default(),
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EstimatorFit {
    pub id: EstimatorId,
    pub family: Family,
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    /// Robust covariance (group-kernel sandwich), when requested.
    pub avar: Option<DMatrix<f64>>,
    pub se: Option<DVector<f64>>,
    pub kernel: Option<KernelSpec>,
    pub spatial: Option<SpatialParams>,
    pub weight_mode: Option<WeightMode>,
    pub weight_repairs: usize,
    pub separation: bool,
    pub loglik: Option<f64>,
}

impl EstimatorFit {
    /// Average partial effect of covariate `which`; needs the covariance.
    pub fn partial_effect(&self, ds: &Dataset, which: usize, kind: EffectKind) -> Result<PartialEffect> {
        let avar = self
            .avar
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("partial effects need a covariance matrix".into()))?;
        partial_effects(&self.family, &self.beta, avar, ds, which, kind)
    }
}

/// Standardized residuals divided by sqrt(mean r^2), so overdispersed
/// Pearson residuals still estimate correlations.
fn dispersion_scaled(res: &PqmleResult) -> DVector<f64> {
    let phi = res.std_residuals.norm_squared() / res.std_residuals.len() as f64;
    if phi > 0.0 {
        &res.std_residuals / phi.sqrt()
    } else {
        res.std_residuals.clone()
    }
}

/// Fits several estimators on one dataset, sharing first steps.
pub struct FitSession<'a> {
    ds: &'a Dataset,
    gi: GroupIndex,
    settings: EstimatorSettings,
    group_distances: Option<DMatrix<f64>>,
    poisson: Option<Result<PqmleResult>>,
    nb2: Option<Result<(PqmleResult, f64)>>,
    probit: Option<Result<PqmleResult>>,
}

fn share<T: Clone>(r: &Result<T>) -> Result<T> {
    match r {
        Ok(v) => Ok(v.clone()),
        Err(e) => Err(Error::InvalidArgument(format!("first step failed: {e}"))),
    }
}

impl<'a> FitSession<'a> {
    pub fn new(ds: &'a Dataset, settings: EstimatorSettings) -> Self {
        FitSession {
            ds,
            gi: ds.group_index(),
            settings,
            group_distances: None,
            poisson: None,
            nb2: None,
            probit: None,
        }
    }

    pub fn group_index(&self) -> &GroupIndex {
        &self.gi
    }

    pub fn group_distances(&mut self) -> &DMatrix<f64> {
        if self.group_distances.is_none() {
            self.group_distances = Some(self.ds.group_distance_matrix(&self.gi));
        }
        self.group_distances.as_ref().unwrap()
    }

    pub fn kernel(&mut self) -> Result<KernelSpec> {
        let choice = self.settings.kernel;
        choice.resolve(self.group_distances())
    }

    fn poisson_first(&mut self) -> Result<PqmleResult> {
        if self.poisson.is_none() {
            self.poisson = Some(fit_pqmle(self.ds, &Family::Poisson, &self.settings.solver));
        }
        share(self.poisson.as_ref().unwrap())
    }

    /// NB2 pooled fit with tau2 from the Poisson first step.
    fn nb2_first(&mut self) -> Result<(PqmleResult, f64)> {
        if self.nb2.is_none() {
            let r = self.poisson_first().and_then(|p| {
                if !p.converged {
                    return Err(Error::NotConverged("Poisson step of the NB2 fit".into()));
                }
                let tau2 = estimate_tau2(&p)?;
                let f = Family::negbin2_with_exponent(tau2, self.settings.nb2_exponent)?;
                Ok((fit_pqmle(self.ds, &f, &self.settings.solver)?, tau2))
            });
            self.nb2 = Some(r);
        }
        share(self.nb2.as_ref().unwrap())
    }

    fn probit_first(&mut self) -> Result<PqmleResult> {
        if self.probit.is_none() {
            self.probit = Some(fit_pqmle(self.ds, &Family::BernoulliProbit, &self.settings.solver));
        }
        share(self.probit.as_ref().unwrap())
    }

    fn first_step(&mut self, family: FamilyChoice) -> Result<PqmleResult> {
        match family {
            FamilyChoice::Poisson => self.poisson_first(),
            FamilyChoice::Nb2 => Ok(self.nb2_first()?.0),
            FamilyChoice::Probit => self.probit_first(),
        }
    }

    fn spatial_params(&mut self, family: FamilyChoice, first: &PqmleResult) -> Result<(SpatialParams, WeightMode)> {
        let s = self.settings;
        let tau2 = match family {
            FamilyChoice::Probit => 0.0,
            FamilyChoice::Nb2 => self.nb2_first()?.1,
            FamilyChoice::Poisson => estimate_tau2(first)?,
        };
        let mode = if s.working == WorkingModel::PoissonStructural {
            if !family.is_count() {
                return Err(Error::InvalidArgument(
                    "the poisson-structural working model needs a count family".into(),
                ));
            }
            WeightMode::PoissonStructural
        } else {
            WeightMode::GenericCorrelation
        };
        let corr = match s.working {
            WorkingModel::Independence => CorrelationModel::Independence,
            WorkingModel::Exchangeable => CorrelationModel::Exchangeable {
                pi: estimate_exchangeable_scaled(first, &self.gi)?,
            },
            w => {
                let kind = w.distance_kind().expect("distance-based model");
                let rho = match s.rho_estimator {
                    RhoEstimator::Direct => {
                        if !family.is_count() {
                            return Err(Error::InvalidArgument(
                                "the direct rho estimator is defined for count families only".into(),
                            ));
                        }
                        estimate_rho_direct(first, self.ds, &self.gi, s.rho_pairs)?.rho
                    }
                    RhoEstimator::Lsq | RhoEstimator::Prentice => {
                        let (pairs, target, bracket) = if mode == WeightMode::PoissonStructural {
                            let pairs = ResidualPairs::count_scaled(first, self.ds, &self.gi);
                            let bracket = rho_bracket(&pairs);
                            (pairs, PairTarget::CountCovariance, bracket)
                        } else {
                            let pairs = ResidualPairs::within_groups(&dispersion_scaled(first), self.ds, &self.gi);
                            let bracket = correlation_bracket(&pairs, kind);
                            (pairs, PairTarget::Correlation(kind), bracket)
                        };
                        if pairs.is_empty() {
                            return Err(Error::NoMultiMemberGroups);
                        }
                        let fit = estimate_rho_lsq_in(&pairs, target, bracket.0, bracket.1)?;
                        if fit.degenerate {
                            log::warn!("rho search: flat objective, using bracket midpoint");
                        }
                        fit.rho
                    }
                };
                kind.with_param(rho)
            }
        };
        Ok((SpatialParams::new(tau2, corr)?, mode))
    }

    pub fn fit(&mut self, id: EstimatorId, with_se: bool) -> Result<EstimatorFit> {
        match id.family {
            FamilyChoice::Probit => self.ds.validate_binary()?,
            _ => self.ds.validate_counts()?,
        }
        let first = self.first_step(id.family)?;
        let family = first.family;
        match id.kind {
            EstimatorKind::Pqmle => {
                let mut out = EstimatorFit {
                    id,
                    family,
                    beta: first.beta.clone(),
                    converged: first.converged,
                    iterations: first.iterations,
                    score_norm: first.score_norm,
                    avar: None,
                    se: None,
                    kernel: None,
                    spatial: None,
                    weight_mode: None,
                    weight_repairs: 0,
                    separation: first.separation,
                    loglik: Some(first.loglik),
                };
                if with_se && first.converged {
                    let kernel = self.kernel()?;
                    let wm = build_weight_matrices(
                        self.ds,
                        &self.gi,
                        &family,
                        &first.beta,
                        &SpatialParams::independence(),
                        WeightMode::GenericCorrelation,
                    )?;
                    let gd = self.group_distances().clone();
                    let avar = group_sandwich(self.ds, &self.gi, &family, &first.beta, &wm, &kernel, &gd)?;
                    out.se = Some(avar.diagonal().map(|v| v.max(0.0).sqrt()));
                    out.avar = Some(avar);
                    out.kernel = Some(kernel);
                }
                Ok(out)
            }
            EstimatorKind::Gee => {
                if !first.converged {
                    return Err(Error::NotConverged(format!("first step of {id}")));
                }
                let (sp, mode) = self.spatial_params(id.family, &first)?;
                let mut fit = gee_fit(self.ds, &self.gi, &family, &first, &sp, mode, &self.settings.solver)?;
                if with_se && fit.converged {
                    let kernel = self.kernel()?;
                    let gd = self.group_distances().clone();
                    let avar = crate::gee::sandwich_avar_with_distances(self.ds, &self.gi, &fit, &kernel, &gd)?;
                    fit.se = Some(avar.diagonal().map(|v| v.max(0.0).sqrt()));
                    fit.avar = Some(avar);
                    fit.kernel = Some(kernel);
                }
                Ok(EstimatorFit {
                    id,
                    family,
                    beta: fit.beta,
                    converged: fit.converged,
                    iterations: fit.iterations,
                    score_norm: fit.score_norm,
                    avar: fit.avar,
                    se: fit.se,
                    kernel: fit.kernel,
                    spatial: Some(sp),
                    weight_mode: Some(mode),
                    weight_repairs: fit.weights.repairs(),
                    separation: first.separation,
                    loglik: None,
                })
            }
        }
    }
}
