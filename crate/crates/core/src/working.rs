//! Spatial nuisance estimation and per-group working covariance matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupIndex};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::pqmle::PqmleResult;

/// Lower end of the rho search bracket.
pub const RHO_MIN: f64 = 1e-6;
/// Exchangeable correlation is kept this far inside its PD range.
pub const EXCHANGEABLE_EPS: f64 = 1e-3;
const RIDGE_START: f64 = 1e-8;
const RIDGE_CAP: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationKind {
    Independence,
    Exchangeable,
    /// exp(-d/rho)
    CressieExp,
    /// rho/d
    InverseDistance,
    /// (exp(rho/d) - 1)/(e - 1)
    ExpMinusOne,
}

impl CorrelationKind {
    pub fn with_param(self, param: f64) -> CorrelationModel {
        match self {
            CorrelationKind::Independence => CorrelationModel::Independence,
            CorrelationKind::Exchangeable => CorrelationModel::Exchangeable { pi: param },
            CorrelationKind::CressieExp => CorrelationModel::CressieExp { rho: param },
            CorrelationKind::InverseDistance => CorrelationModel::InverseDistance { rho: param },
            CorrelationKind::ExpMinusOne => CorrelationModel::ExpMinusOne { rho: param },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorrelationModel {
    Independence,
    Exchangeable { pi: f64 },
    CressieExp { rho: f64 },
    InverseDistance { rho: f64 },
    ExpMinusOne { rho: f64 },
}

impl CorrelationModel {
    pub fn kind(&self) -> CorrelationKind {
        match self {
            CorrelationModel::Independence => CorrelationKind::Independence,
            CorrelationModel::Exchangeable { .. } => CorrelationKind::Exchangeable,
            CorrelationModel::CressieExp { .. } => CorrelationKind::CressieExp,
            CorrelationModel::InverseDistance { .. } => CorrelationKind::InverseDistance,
            CorrelationModel::ExpMinusOne { .. } => CorrelationKind::ExpMinusOne,
        }
    }

    pub fn param(&self) -> Option<f64> {
        match *self {
            CorrelationModel::Independence => None,
            CorrelationModel::Exchangeable { pi } => Some(pi),
            CorrelationModel::CressieExp { rho }
            | CorrelationModel::InverseDistance { rho }
            | CorrelationModel::ExpMinusOne { rho } => Some(rho),
        }
    }

    /// Correlation between two distinct members at distance `d`. Coincident
    /// locations (d = 0) get the d -> 0 limit, capped at 1.
    pub fn corr(&self, d: f64) -> f64 {
        match *self {
            CorrelationModel::Independence => 0.0,
            CorrelationModel::Exchangeable { pi } => pi,
            CorrelationModel::CressieExp { rho } => {
                if d == 0.0 {
                    1.0
                } else if rho <= 0.0 {
                    0.0
                } else {
                    (-d / rho).exp()
                }
            }
            CorrelationModel::InverseDistance { rho } => {
                if d == 0.0 {
                    1.0
                } else {
                    rho / d
                }
            }
            CorrelationModel::ExpMinusOne { rho } => {
                if d == 0.0 {
                    1.0
                } else {
                    (rho / d).exp_m1() / (std::f64::consts::E - 1.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialParams {
    pub tau2: f64,
    pub corr: CorrelationModel,
}

impl SpatialParams {
    pub fn new(tau2: f64, corr: CorrelationModel) -> Result<Self> {
        if !tau2.is_finite() {
            return Err(Error::InvalidArgument(format!("tau2 must be finite, got {tau2}")));
        }
        Ok(SpatialParams {
            tau2: tau2.max(0.0),
            corr,
        })
    }

    pub fn independence() -> Self {
        SpatialParams {
            tau2: 0.0,
            corr: CorrelationModel::Independence,
        }
    }
}

/// No-intercept OLS slope of (u^2 - m) on m^2, clamped at zero.
pub fn estimate_tau2(res: &PqmleResult) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (u, m) in res.residuals.iter().zip(res.fitted_means.iter()) {
        let b = m * m;
        num += (u * u - m) * b;
        den += b * b;
    }
    if den == 0.0 || !den.is_finite() {
        return Err(Error::InvalidArgument(
            "tau2 regression needs non-zero fitted means".into(),
        ));
    }
    Ok((num / den).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoPairs {
    #[default]
    Within,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoDirect {
    pub rho: f64,
    pub used_pairs: usize,
    pub skipped_pairs: usize,
}

/// Average of log(u_i u_j/(m_i m_j) + 1) * d_ij over ordered pairs i != j.
/// Pairs with a non-positive log argument are skipped; the average runs over
/// the pairs actually used.
pub fn estimate_rho_direct(res: &PqmleResult, ds: &Dataset, gi: &GroupIndex, pairs: RhoPairs) -> Result<RhoDirect> {
    let u = &res.residuals;
    let m = &res.fitted_means;
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    let mut visit = |i: usize, j: usize| {
        let arg = u[i] * u[j] / (m[i] * m[j]) + 1.0;
        if arg > 0.0 && arg.is_finite() {
            sum += arg.ln() * ds.pairwise_distance(i, j);
            used += 1;
        } else {
            skipped += 1;
        }
    };
    match pairs {
        RhoPairs::Within => {
            for members in gi.groups() {
                for &i in members {
                    for &j in members {
                        if i != j {
                            visit(i, j);
                        }
                    }
                }
            }
        }
        RhoPairs::All => {
            for i in 0..ds.n() {
                for j in 0..ds.n() {
                    if i != j {
                        visit(i, j);
                    }
                }
            }
        }
    }
    if used == 0 {
        return Err(Error::NoInformativePairs);
    }
    if skipped > 0 {
        log::info!("direct rho estimator skipped {skipped} of {} pairs", used + skipped);
    }
    Ok(RhoDirect {
        rho: sum / used as f64,
        used_pairs: used,
        skipped_pairs: skipped,
    })
}

/// Within-group pair products with their distances, one entry per unordered
/// pair l < m.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ResidualPairs {
    pub products: Vec<f64>,
    pub distances: Vec<f64>,
}

impl ResidualPairs {
    /// Products v_l v_m of an arbitrary per-row vector.
    pub fn within_groups(values: &DVector<f64>, ds: &Dataset, gi: &GroupIndex) -> Self {
        let mut out = ResidualPairs::default();
        for members in gi.groups() {
            for (a, &i) in members.iter().enumerate() {
                for &j in &members[..a] {
                    out.products.push(values[j] * values[i]);
                    out.distances.push(ds.pairwise_distance(j, i));
                }
            }
        }
        out
    }

    /// Standardized residual products r_l r_m.
    pub fn standardized(res: &PqmleResult, ds: &Dataset, gi: &GroupIndex) -> Self {
        Self::within_groups(&res.std_residuals, ds, gi)
    }

    /// Mean-scaled products u_l u_m / (m_l m_m), the count covariance target.
    pub fn count_scaled(res: &PqmleResult, ds: &Dataset, gi: &GroupIndex) -> Self {
        let scaled = res.residuals.zip_map(&res.fitted_means, |u, m| u / m);
        Self::within_groups(&scaled, ds, gi)
    }

    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn max_distance(&self) -> f64 {
        self.distances.iter().cloned().fold(0.0, f64::max)
    }
}

/// What a pair product is matched against in the least-squares rho search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairTarget {
    /// C(d, rho) from a correlation family.
    Correlation(CorrelationKind),
    /// exp(rho/d) - 1, matched against u_l u_m / (m_l m_m).
    CountCovariance,
}

impl PairTarget {
    pub fn value(&self, d: f64, rho: f64) -> f64 {
        match *self {
            PairTarget::Correlation(kind) => kind.with_param(rho).corr(d),
            PairTarget::CountCovariance => {
                if d == 0.0 {
                    f64::INFINITY
                } else {
                    (rho / d).exp_m1()
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RhoFit {
    pub rho: f64,
    pub objective: f64,
    /// Minimizer sits on a bracket end.
    pub boundary: bool,
    /// Objective is flat over the bracket; `rho` is the bracket midpoint.
    pub degenerate: bool,
}

pub fn lsq_objective(pairs: &ResidualPairs, target: PairTarget, rho: f64) -> f64 {
    let s: f64 = pairs
        .products
        .iter()
        .zip(&pairs.distances)
        .map(|(e, &d)| (e - target.value(d, rho)).powi(2))
        .sum();
    if s.is_finite() {
        s
    } else {
        f64::INFINITY
    }
}

/// Search bracket [RHO_MIN, 10 * max pair distance].
pub fn rho_bracket(pairs: &ResidualPairs) -> (f64, f64) {
    let hi = 10.0 * pairs.max_distance();
    (RHO_MIN, hi.max(10.0 * RHO_MIN))
}

/// Largest pairwise correlation a fitted rho/d or (e^(rho/d) - 1)/(e - 1)
/// model may imply.
pub const MAX_FITTED_CORRELATION: f64 = 0.95;

/// Search bracket for a correlation family. Families that exceed 1 at small
/// distances have the upper end cut so the closest pair stays at or below
/// `MAX_FITTED_CORRELATION`.
pub fn correlation_bracket(pairs: &ResidualPairs, kind: CorrelationKind) -> (f64, f64) {
    let (lo, hi) = rho_bracket(pairs);
    let d_min = pairs
        .distances
        .iter()
        .cloned()
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !d_min.is_finite() {
        return (lo, hi);
    }
    let cap = match kind {
        CorrelationKind::InverseDistance => d_min * MAX_FITTED_CORRELATION,
        CorrelationKind::ExpMinusOne => d_min * (MAX_FITTED_CORRELATION * (std::f64::consts::E - 1.0)).ln_1p(),
        _ => hi,
    };
    (lo, hi.min(cap).max(10.0 * lo))
}

/// Least-squares rho: log-spaced scan, golden section around the best grid
/// point, then parabolic polishing.
pub fn estimate_rho_lsq(pairs: &ResidualPairs, target: PairTarget) -> Result<RhoFit> {
    let (lo, hi) = rho_bracket(pairs);
    estimate_rho_lsq_in(pairs, target, lo, hi)
}

pub fn estimate_rho_lsq_in(pairs: &ResidualPairs, target: PairTarget, lo: f64, hi: f64) -> Result<RhoFit> {
    if pairs.is_empty() {
        return Err(Error::NoInformativePairs);
    }
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::InvalidArgument(format!("bad rho bracket [{lo}, {hi}]")));
    }
    let obj = |r: f64| lsq_objective(pairs, target, r);
    const GRID: usize = 400;
    let ratio = (hi / lo).ln() / (GRID - 1) as f64;
    let grid: Vec<f64> = (0..GRID)
        .map(|k| {
            if k == GRID - 1 {
                hi
            } else {
                lo * (ratio * k as f64).exp()
            }
        })
        .collect();
    let vals: Vec<f64> = grid.iter().map(|&r| obj(r)).collect();
    let (kbest, &vbest) = vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty grid");
    let vmax = vals
        .iter()
        .cloned()
        .filter(|v| v.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if vmax - vbest <= 1e-14 * (1.0 + vbest.abs()) {
        let mid = 0.5 * (lo + hi);
        return Ok(RhoFit {
            rho: mid,
            objective: obj(mid),
            boundary: false,
            degenerate: true,
        });
    }

    let mut a = grid[kbest.saturating_sub(1)];
    let mut b = grid[(kbest + 1).min(GRID - 1)];
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - invphi * (b - a);
    let mut d = a + invphi * (b - a);
    let mut fc = obj(c);
    let mut fd = obj(d);
    for _ in 0..200 {
        if (b - a) <= 1e-12 * (a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - invphi * (b - a);
            fc = obj(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + invphi * (b - a);
            fd = obj(d);
        }
    }
    let (mut rho, mut best) = if fc < fd { (c, fc) } else { (d, fd) };

    // parabolic polishing through (rho - h, rho, rho + h)
    for _ in 0..5 {
        let h = (1e-4 * rho).max(1e-10);
        if rho - h < lo || rho + h > hi {
            break;
        }
        let (fm, fp) = (obj(rho - h), obj(rho + h));
        let curv = fp - 2.0 * best + fm;
        if !(curv > 0.0) {
            break;
        }
        let cand = (rho - h * (fp - fm) / (2.0 * curv)).clamp(lo, hi);
        let fcand = obj(cand);
        if fcand < best {
            rho = cand;
            best = fcand;
        } else {
            break;
        }
    }

    // never worse than a bracket end
    let (flo, fhi) = (obj(lo), obj(hi));
    let mut boundary = false;
    if flo <= best {
        rho = lo;
        best = flo;
        boundary = true;
    }
    if fhi < best {
        rho = hi;
        best = fhi;
        boundary = true;
    }
    let span = hi - lo;
    if (rho - lo) <= 1e-9 * span || (hi - rho) <= 1e-9 * span {
        boundary = true;
    }
    Ok(RhoFit {
        rho,
        objective: best,
        boundary,
        degenerate: false,
    })
}

/// Clamp range for an exchangeable correlation given the largest group.
pub fn exchangeable_bounds(max_group: usize) -> (f64, f64) {
    let lower = if max_group >= 2 {
        -1.0 / (max_group as f64 - 1.0) + EXCHANGEABLE_EPS
    } else {
        -1.0 + EXCHANGEABLE_EPS
    };
    (lower, 1.0 - EXCHANGEABLE_EPS)
}

/// Mean within-group product of `r` over unordered pairs, clamped into the
/// PD range.
pub fn estimate_exchangeable_from(r: &DVector<f64>, gi: &GroupIndex) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for members in gi.groups() {
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[..a] {
                sum += r[i] * r[j];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoMultiMemberGroups);
    }
    let (lo, hi) = exchangeable_bounds(gi.max_size());
    Ok((sum / count as f64).clamp(lo, hi))
}

/// Exchangeable correlation from standardized first-step residuals.
pub fn estimate_exchangeable(res: &PqmleResult, gi: &GroupIndex) -> Result<f64> {
    estimate_exchangeable_from(&res.std_residuals, gi)
}

/// Moment version that first divides by the dispersion estimate mean(r^2),
/// so overdispersed Pearson residuals still give a correlation.
pub fn estimate_exchangeable_scaled(res: &PqmleResult, gi: &GroupIndex) -> Result<f64> {
    let phi = res.std_residuals.norm_squared() / res.std_residuals.len() as f64;
    if !(phi > 0.0) {
        return estimate_exchangeable(res, gi);
    }
    estimate_exchangeable_from(&(&res.std_residuals / phi.sqrt()), gi)
}

/// Least-squares fit of the lower-triangle residual products to the chosen
/// correlation family. tau2 is estimated for count families and 0 for
/// probit.
pub fn prentice_fit(res: &PqmleResult, ds: &Dataset, gi: &GroupIndex, kind: CorrelationKind) -> Result<SpatialParams> {
    let tau2 = if res.family.is_count() {
        estimate_tau2(res)?
    } else {
        0.0
    };
    let corr = match kind {
        CorrelationKind::Independence => CorrelationModel::Independence,
        CorrelationKind::Exchangeable => CorrelationModel::Exchangeable {
            pi: estimate_exchangeable(res, gi)?,
        },
        _ => {
            let pairs = ResidualPairs::standardized(res, ds, gi);
            if pairs.is_empty() {
                return Err(Error::NoMultiMemberGroups);
            }
            let (lo, hi) = correlation_bracket(&pairs, kind);
            let fit = estimate_rho_lsq_in(&pairs, PairTarget::Correlation(kind), lo, hi)?;
            if fit.degenerate {
                log::warn!("prentice fit: flat objective, using bracket midpoint");
            }
            kind.with_param(fit.rho)
        }
    };
    SpatialParams::new(tau2, corr)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// v = m(1 + m tau2), r = m_l m_m tau2 c(d, rho).
    PoissonStructural,
    /// W = V^1/2 R V^1/2 with family LEF variances.
    #[default]
    GenericCorrelation,
}

#[derive(Debug, Clone)]
pub struct GroupWeight {
    pub w: DMatrix<f64>,
    pub chol: Cholesky<f64, Dyn>,
    pub variances: DVector<f64>,
    /// Ridge added to the diagonal (0 when none was needed).
    pub ridge: f64,
}

/// Per-group working covariance matrices with their Cholesky factors.
#[derive(Debug, Clone)]
pub struct WeightMatrixSet {
    groups: Vec<GroupWeight>,
}

impl WeightMatrixSet {
    pub fn len(&self) -> usize {
        self.groups.len()
    }
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
    pub fn group(&self, g: usize) -> &GroupWeight {
        &self.groups[g]
    }
    pub fn repairs(&self) -> usize {
        self.groups.iter().filter(|g| g.ridge > 0.0).count()
    }
    pub fn max_ridge(&self) -> f64 {
        self.groups.iter().map(|g| g.ridge).fold(0.0, f64::max)
    }
    /// W_g^-1 b
    pub fn solve(&self, g: usize, b: &DVector<f64>) -> DVector<f64> {
        self.groups[g].chol.solve(b)
    }
    /// W_g^-1 B
    pub fn solve_mat(&self, g: usize, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.groups[g].chol.solve(b)
    }

    /// Every W_g multiplied by `c > 0`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        let groups = self
            .groups
            .iter()
            .enumerate()
            .map(|(g, gw)| {
                let w = &gw.w * c;
                let chol = w.clone().cholesky().ok_or(Error::BadlyConditioned {
                    group: g,
                    ridge: 0.0,
                    cap: 0.0,
                })?;
                Ok(GroupWeight {
                    w,
                    chol,
                    variances: &gw.variances * c,
                    ridge: gw.ridge,
                })
            })
            .collect::<Result<_>>()?;
        Ok(WeightMatrixSet { groups })
    }

    /// Assembles a set from explicit matrices (each must be SPD).
    pub fn from_matrices(ws: Vec<DMatrix<f64>>) -> Result<Self> {
        let groups = ws
            .into_iter()
            .enumerate()
            .map(|(g, w)| {
                let (chol, ridge) = repair_cholesky(&w, g)?;
                let variances = w.diagonal();
                Ok(GroupWeight {
                    w: w + DMatrix::identity(variances.len(), variances.len()) * ridge,
                    chol,
                    variances,
                    ridge,
                })
            })
            .collect::<Result<_>>()?;
        Ok(WeightMatrixSet { groups })
    }
}

/// Cholesky with an additive ridge that doubles from 1e-8 * max diag until
/// the factorization succeeds; fails past 1e-2 * max diag.
fn repair_cholesky(w: &DMatrix<f64>, g: usize) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(ch) = w.clone().cholesky() {
        return Ok((ch, 0.0));
    }
    let max_diag = w.diagonal().amax();
    let cap = RIDGE_CAP * max_diag;
    let mut ridge = RIDGE_START * max_diag;
    let n = w.nrows();
    while ridge <= cap {
        let trial = w + DMatrix::identity(n, n) * ridge;
        if let Some(ch) = trial.cholesky() {
            return Ok((ch, ridge));
        }
        ridge *= 2.0;
    }
    Err(Error::BadlyConditioned { group: g, ridge, cap })
}

pub fn build_weight_matrices(
    ds: &Dataset,
    gi: &GroupIndex,
    f: &Family,
    beta: &DVector<f64>,
    sp: &SpatialParams,
    mode: WeightMode,
) -> Result<WeightMatrixSet> {
    let eta = ds.linear_index(beta);
    let mut groups = Vec::with_capacity(gi.len());
    for (g, members) in gi.groups().iter().enumerate() {
        let l = members.len();
        let mut means = DVector::zeros(l);
        let mut vars = DVector::zeros(l);
        for (a, &i) in members.iter().enumerate() {
            match mode {
                WeightMode::GenericCorrelation => {
                    let (m, v) = f.mean_var_eta(eta[i])?;
                    means[a] = m;
                    vars[a] = v;
                }
                WeightMode::PoissonStructural => {
                    let m = Family::Poisson.mean_eta(eta[i])?;
                    means[a] = m;
                    vars[a] = m * (1.0 + m * sp.tau2);
                }
            }
        }
        let mut w = DMatrix::from_diagonal(&vars);
        for a in 0..l {
            for b in 0..a {
                let d = ds.pairwise_distance(members[a], members[b]);
                let c = sp.corr.corr(d);
                let off = match mode {
                    WeightMode::GenericCorrelation => (vars[a] * vars[b]).sqrt() * c,
                    WeightMode::PoissonStructural => means[a] * means[b] * sp.tau2 * c,
                };
                w[(a, b)] = off;
                w[(b, a)] = off;
            }
        }
        let (chol, ridge) = repair_cholesky(&w, g)?;
        if ridge > 0.0 {
            for a in 0..l {
                w[(a, a)] += ridge;
            }
        }
        groups.push(GroupWeight {
            w,
            chol,
            variances: vars,
            ridge,
        });
    }
    let set = WeightMatrixSet { groups };
    if set.repairs() > 0 {
        log::warn!(
            "ridge-repaired {} working matrices (largest ridge {:e})",
            set.repairs(),
            set.max_ridge()
        );
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{block_grouping, DistanceMetric};
    use crate::pqmle::{fit_pqmle, SolverOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fake_result(u: Vec<f64>, m: Vec<f64>, family: Family) -> PqmleResult {
        let u = DVector::from_vec(u);
        let m = DVector::from_vec(m);
        let v = m.map(|mi| family.lef_variance(mi).unwrap());
        PqmleResult {
            family,
            beta: DVector::zeros(1),
            iterations: 0,
            converged: true,
            score_norm: 0.0,
            loglik: 0.0,
            separation: false,
            std_residuals: u.zip_map(&v, |a, b| a / b.sqrt()),
            residuals: u,
            fitted_means: m,
            fitted_variances: v,
        }
    }

    fn lattice(side: usize) -> Dataset {
        let n = side * side;
        let coords = (0..n).map(|i| [(i / side + 1) as f64, (i % side + 1) as f64]).collect();
        Dataset::new(
            DVector::zeros(n),
            DMatrix::from_element(n, 1, 1.0),
            coords,
            block_grouping(side, 4).unwrap(),
            DistanceMetric::Euclidean,
        )
        .unwrap()
    }

    #[test]
    fn tau2_cases() {
        let m = vec![1.0, 2.0, 3.0, 0.5];
        // u^2 = m
        let u: Vec<f64> = m.iter().map(|v: &f64| v.sqrt()).collect();
        assert_eq!(estimate_tau2(&fake_result(u, m.clone(), Family::Poisson)).unwrap(), 0.0);
        // u^2 - m = 0.5 m^2
        let u: Vec<f64> = m.iter().map(|v| (v + 0.5 * v * v).sqrt()).collect();
        let t = estimate_tau2(&fake_result(u, m, Family::Poisson)).unwrap();
        assert!((t - 0.5).abs() < 1e-14);
    }

    #[test]
    fn tau2_clamps_negative_slope() {
        let m = vec![1.0, 2.0];
        let t = estimate_tau2(&fake_result(vec![0.0, 0.0], m, Family::Poisson)).unwrap();
        assert_eq!(t, 0.0);
    }

    proptest! {
        #[test]
        fn tau2_is_closed_form_slope(pts in prop::collection::vec((-3.0f64..3.0, 0.1f64..5.0), 2..30)) {
            let (u, m): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let (mut sab, mut sbb) = (0.0, 0.0);
            for (ui, mi) in u.iter().zip(&m) {
                let a = ui * ui - mi;
                let b = mi * mi;
                sab += a * b;
                sbb += b * b;
            }
            let t = estimate_tau2(&fake_result(u, m, Family::Poisson)).unwrap();
            prop_assert!((t - (sab / sbb).max(0.0)).abs() <= 1e-12 * (1.0 + t.abs()));
        }
    }

    #[test]
    fn rho_direct_small_cases() {
        let ds = Dataset::new(
            DVector::zeros(2),
            DMatrix::from_element(2, 1, 1.0),
            vec![[0.0, 0.0], [0.0, 2.0]],
            vec![0, 0],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        let gi = ds.group_index();
        let zero = fake_result(vec![0.0, 0.0], vec![1.0, 1.0], Family::Poisson);
        assert_eq!(estimate_rho_direct(&zero, &ds, &gi, RhoPairs::Within).unwrap().rho, 0.0);
        // u1 u2 / (m1 m2) = e - 1
        let e1 = std::f64::consts::E - 1.0;
        let r = fake_result(vec![e1.sqrt(), e1.sqrt()], vec![1.0, 1.0], Family::Poisson);
        let fit = estimate_rho_direct(&r, &ds, &gi, RhoPairs::Within).unwrap();
        assert!((fit.rho - 2.0).abs() < 1e-14);
        assert_eq!(fit.used_pairs, 2);
        // negative product below -1 has no log
        let bad = fake_result(vec![2.0, -2.0], vec![1.0, 1.0], Family::Poisson);
        assert!(matches!(
            estimate_rho_direct(&bad, &ds, &gi, RhoPairs::Within),
            Err(Error::NoInformativePairs)
        ));
    }

    #[test]
    fn rho_direct_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10;
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)])
            .collect();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
        let m: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let groups: Vec<usize> = (0..n).map(|i| i / 4).collect();
        let ds = Dataset::new(
            DVector::zeros(n),
            DMatrix::from_element(n, 1, 1.0),
            coords.clone(),
            groups.clone(),
            DistanceMetric::Euclidean,
        )
        .unwrap();
        let res = fake_result(u.clone(), m.clone(), Family::Poisson);
        for (pairs, within) in [(RhoPairs::All, false), (RhoPairs::Within, true)] {
            let (mut s, mut k) = (0.0, 0usize);
            for i in 0..n {
                for j in 0..n {
                    if i == j || (within && groups[i] != groups[j]) {
                        continue;
                    }
                    let arg = u[i] * u[j] / (m[i] * m[j]) + 1.0;
                    if arg > 0.0 {
                        let d = ((coords[i][0] - coords[j][0]).powi(2) + (coords[i][1] - coords[j][1]).powi(2)).sqrt();
                        s += arg.ln() * d;
                        k += 1;
                    }
                }
            }
            let got = estimate_rho_direct(&res, &ds, &ds.group_index(), pairs).unwrap().rho;
            assert!(((got - s / k as f64) / got).abs() < 1e-12);
        }
    }

    fn planted_pairs(kind: CorrelationKind, rho: f64) -> ResidualPairs {
        let distances: Vec<f64> = vec![1.0, 1.0, 2f64.sqrt(), 2.0, 3.0, 0.5];
        ResidualPairs {
            products: distances.iter().map(|&d| kind.with_param(rho).corr(d)).collect(),
            distances,
        }
    }

    #[test]
    fn lsq_recovers_planted_rho() {
        for kind in [
            CorrelationKind::CressieExp,
            CorrelationKind::InverseDistance,
            CorrelationKind::ExpMinusOne,
        ] {
            let fit = estimate_rho_lsq(&planted_pairs(kind, 1.5), PairTarget::Correlation(kind)).unwrap();
            assert!((fit.rho - 1.5).abs() < 1e-6, "{kind:?}: {}", fit.rho);
            assert!(!fit.boundary && !fit.degenerate);
        }
    }

    #[test]
    fn lsq_zero_products_hit_lower_boundary() {
        let pairs = ResidualPairs {
            products: vec![0.0; 4],
            distances: vec![1.0, 1.0, 2.0, 1.5],
        };
        let fit = estimate_rho_lsq(&pairs, PairTarget::Correlation(CorrelationKind::CressieExp)).unwrap();
        assert!(fit.boundary);
        assert!(fit.rho < 1e-3);
    }

    #[test]
    fn lsq_flat_objective_is_degenerate() {
        let pairs = ResidualPairs {
            products: vec![0.3; 4],
            distances: vec![1.0; 4],
        };
        let fit = estimate_rho_lsq(&pairs, PairTarget::Correlation(CorrelationKind::Independence)).unwrap();
        assert!(fit.degenerate);
        let (lo, hi) = rho_bracket(&pairs);
        assert_eq!(fit.rho, 0.5 * (lo + hi));
        assert!(estimate_rho_lsq(&ResidualPairs::default(), PairTarget::CountCovariance).is_err());
    }

    #[test]
    fn lsq_matches_fine_grid_on_noisy_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let distances: Vec<f64> = (0..20).map(|_| rng.random_range(0.8..3.0)).collect();
        let products: Vec<f64> = distances
            .iter()
            .map(|&d| (-d / 1.2f64).exp() + rng.random_range(-0.2..0.2))
            .collect();
        let pairs = ResidualPairs { products, distances };
        let target = PairTarget::Correlation(CorrelationKind::CressieExp);
        let fit = estimate_rho_lsq(&pairs, target).unwrap();
        // 10^6-point grid over the same bracket
        let (lo, hi) = rho_bracket(&pairs);
        let step = (hi - lo) / 999_999.0;
        let (mut best_r, mut best_v) = (lo, f64::INFINITY);
        for k in 0..1_000_000 {
            let r = lo + step * k as f64;
            let v = lsq_objective(&pairs, target, r);
            if v < best_v {
                best_v = v;
                best_r = r;
            }
        }
        assert!((fit.rho - best_r).abs() <= step);
        assert!(fit.objective <= best_v + 1e-12);
    }

    #[test]
    fn exchangeable_cases() {
        let ds = lattice(2);
        let gi = GroupIndex::from_ids(&[0, 0, 1, 1]);
        // products 0.2 and 0.4
        let r = DVector::from_vec(vec![1.0, 0.2, 2.0, 0.2]);
        assert!((estimate_exchangeable_from(&r, &gi).unwrap() - 0.3).abs() < 1e-15);
        let ones = DVector::from_element(4, 1.0);
        assert_eq!(
            estimate_exchangeable_from(&ones, &ds.group_index()).unwrap(),
            1.0 - EXCHANGEABLE_EPS
        );
        let singles = GroupIndex::from_ids(&[0, 1, 2]);
        assert!(matches!(
            estimate_exchangeable_from(&DVector::zeros(3), &singles),
            Err(Error::NoMultiMemberGroups)
        ));
    }

    #[test]
    fn exchangeable_near_zero_for_independent_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 10 000 groups of size 2 -> 10 000 pairs
        let n = 20_000;
        let r = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
        let gi = GroupIndex::from_ids(&(0..n).map(|i| i / 2).collect::<Vec<_>>());
        assert!(estimate_exchangeable_from(&r, &gi).unwrap().abs() < 0.05);
    }

    fn probit_lattice_fit(seed: u64) -> (Dataset, PqmleResult) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = lattice(6);
        let n = base.n();
        let mut x = DMatrix::from_element(n, 2, 1.0);
        let mut y = DVector::zeros(n);
        for i in 0..n {
            x[(i, 1)] = rng.random_range(-1.0..1.0);
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            y[i] = if x[(i, 1)] + z > 0.0 { 1.0 } else { 0.0 };
        }
        let ds = Dataset::new(
            y,
            x,
            base.coords().to_vec(),
            base.group_ids().to_vec(),
            DistanceMetric::Euclidean,
        )
        .unwrap();
        let res = fit_pqmle(&ds, &Family::BernoulliProbit, &SolverOptions::default()).unwrap();
        (ds, res)
    }

    #[test]
    fn prentice_exchangeable_equals_moment_estimator() {
        let (ds, res) = probit_lattice_fit(8);
        let gi = ds.group_index();
        let sp = prentice_fit(&res, &ds, &gi, CorrelationKind::Exchangeable).unwrap();
        let direct = estimate_exchangeable(&res, &gi).unwrap();
        let CorrelationModel::Exchangeable { pi } = sp.corr else {
            panic!()
        };
        assert!(((pi - direct) / direct).abs() < 1e-8);
        assert_eq!(sp.tau2, 0.0);
    }

    #[test]
    fn prentice_cressie_matches_grid() {
        let (ds, res) = probit_lattice_fit(12);
        let gi = ds.group_index();
        let sp = prentice_fit(&res, &ds, &gi, CorrelationKind::CressieExp).unwrap();
        let pairs = ResidualPairs::standardized(&res, &ds, &gi);
        let target = PairTarget::Correlation(CorrelationKind::CressieExp);
        let (lo, hi) = rho_bracket(&pairs);
        let step = (hi - lo) / 99_999.0;
        let best = (0..100_000)
            .map(|k| lo + step * k as f64)
            .map(|r| (r, lsq_objective(&pairs, target, r)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let rho = sp.corr.param().unwrap();
        assert!(lsq_objective(&pairs, target, rho) <= best.1 + 1e-12);
        assert!((rho - best.0).abs() <= step || lsq_objective(&pairs, target, rho) <= best.1);
    }

    #[test]
    fn prentice_recovers_planted_cressie() {
        // residual products built so that r_l r_m = exp(-d/0.8) within each tile
        let ds = lattice(2);
        let gi = ds.group_index();
        let pairs = ResidualPairs::within_groups(&DVector::from_element(4, 1.0), &ds, &gi);
        let planted = ResidualPairs {
            products: pairs.distances.iter().map(|d| (-d / 0.8f64).exp()).collect(),
            distances: pairs.distances.clone(),
        };
        let fit = estimate_rho_lsq(&planted, PairTarget::Correlation(CorrelationKind::CressieExp)).unwrap();
        assert!((fit.rho - 0.8).abs() < 1e-6);
    }

    #[test]
    fn cressie_shape() {
        for &rho in &[0.3, 1.0, 4.0] {
            let c = CorrelationModel::CressieExp { rho };
            assert_eq!(c.corr(0.0), 1.0);
            let mut prev = 1.0;
            for k in 1..200 {
                let v = c.corr(k as f64 * 0.1);
                assert!(v > 0.0 && v < prev);
                prev = v;
            }
            assert!(c.corr(1e4) < 1e-12);
            assert!(CorrelationModel::CressieExp { rho: rho * 1.5 }.corr(1.0) > c.corr(1.0));
        }
    }

    #[test]
    fn exp_minus_one_normalization() {
        let c = CorrelationModel::ExpMinusOne { rho: 1.0 };
        assert!((c.corr(1.0) - 1.0).abs() < 1e-15);
        let v = CorrelationModel::ExpMinusOne { rho: 0.5 }.corr(2.0);
        assert!((v - (0.25f64.exp() - 1.0) / (std::f64::consts::E - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn poisson_structural_hand_example() {
        // L = 2, m = (1, 2), tau2 = 1, c = 0.5 -> [[2, 1], [1, 6]]
        let ds = Dataset::new(
            DVector::zeros(2),
            DMatrix::from_row_slice(2, 1, &[0.0, 2f64.ln()]),
            vec![[0.0, 0.0], [0.0, 1.0]],
            vec![0, 0],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        let sp = SpatialParams::new(1.0, CorrelationModel::Exchangeable { pi: 0.5 }).unwrap();
        let wm = build_weight_matrices(
            &ds,
            &ds.group_index(),
            &Family::Poisson,
            &DVector::from_element(1, 1.0),
            &sp,
            WeightMode::PoissonStructural,
        )
        .unwrap();
        let w = &wm.group(0).w;
        let expect = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 6.0]);
        assert!((w - expect).amax() < 1e-14);
    }

    #[test]
    fn structural_with_zero_tau2_is_diagonal() {
        let ds = lattice(4);
        let sp = SpatialParams::new(0.0, CorrelationModel::ExpMinusOne { rho: 0.9 }).unwrap();
        let wm = build_weight_matrices(
            &ds,
            &ds.group_index(),
            &Family::Poisson,
            &DVector::from_element(1, 0.3),
            &sp,
            WeightMode::PoissonStructural,
        )
        .unwrap();
        for g in 0..wm.len() {
            let w = &wm.group(g).w;
            for a in 0..w.nrows() {
                for b in 0..w.ncols() {
                    if a != b {
                        assert_eq!(w[(a, b)], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn independence_solve_is_elementwise_division() {
        let ds = lattice(4);
        let f = Family::BernoulliProbit;
        let beta = DVector::from_element(1, 0.4);
        let wm = build_weight_matrices(
            &ds,
            &ds.group_index(),
            &f,
            &beta,
            &SpatialParams::independence(),
            WeightMode::GenericCorrelation,
        )
        .unwrap();
        let (_, v) = f.mean_var_eta(0.4).unwrap();
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let got = wm.solve(0, &b);
        for k in 0..4 {
            assert!((got[k] - b[k] / v).abs() < 1e-12 * (b[k] / v).abs());
        }
    }

    #[test]
    fn ridge_repair_and_cap() {
        // rank-one matrix needs a ridge
        let w = DMatrix::from_element(3, 3, 1.0);
        let set = WeightMatrixSet::from_matrices(vec![w]).unwrap();
        assert_eq!(set.repairs(), 1);
        assert!(set.max_ridge() > 0.0 && set.max_ridge() <= 1e-2);
        // strongly indefinite matrix cannot be fixed within the cap
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            WeightMatrixSet::from_matrices(vec![bad]),
            Err(Error::BadlyConditioned { .. })
        ));
    }

    proptest! {
        #[test]
        fn structural_correlation_below_one(m1 in 0.01f64..50.0, m2 in 0.01f64..50.0,
                                            tau2 in 0.0f64..20.0, c in -1.0f64..1.0) {
            let v1 = m1 * (1.0 + m1 * tau2);
            let v2 = m2 * (1.0 + m2 * tau2);
            let r = m1 * m2 * tau2 * c;
            prop_assert!(r.abs() / (v1 * v2).sqrt() < 1.0);
        }

        #[test]
        fn weight_matrices_are_spd(seed in 0u64..1000, pi in -0.3f64..0.95, tau2 in 0.0f64..3.0,
                                   structural in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = lattice(4);
            let n = base.n();
            let mut x = DMatrix::from_element(n, 2, 1.0);
            for i in 0..n {
                x[(i, 1)] = rng.random_range(-1.0..1.0);
            }
            let ds = Dataset::new(DVector::zeros(n), x, base.coords().to_vec(),
                                  base.group_ids().to_vec(), DistanceMetric::Euclidean).unwrap();
            let f = Family::negbin2(tau2).unwrap();
            let sp = SpatialParams::new(tau2, CorrelationModel::Exchangeable { pi }).unwrap();
            let mode = if structural { WeightMode::PoissonStructural } else { WeightMode::GenericCorrelation };
            let beta = DVector::from_vec(vec![0.2, 0.7]);
            let wm = build_weight_matrices(&ds, &ds.group_index(), &f, &beta, &sp, mode).unwrap();
            for g in 0..wm.len() {
                let gw = wm.group(g);
                prop_assert_eq!(&gw.w, &gw.w.transpose());
                let l = gw.w.nrows();
                let resid = wm.solve_mat(g, &gw.w) - DMatrix::<f64>::identity(l, l);
                prop_assert!(resid.amax() < 1e-10);
                for a in 0..l {
                    prop_assert!((gw.w[(a, a)] - gw.variances[a] - gw.ridge).abs() <= 1e-12 * gw.w[(a, a)]);
                    for b in 0..a {
                        let c = gw.w[(a, b)] / (gw.w[(a, a)] * gw.w[(b, b)]).sqrt();
                        prop_assert!(c.abs() < 1.0);
                    }
                }
            }
        }
    }
}
