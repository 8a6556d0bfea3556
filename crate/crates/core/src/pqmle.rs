//! First-step pooled QMLE, its spatial-HAC variance, and a log-linear OLS
//! baseline.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::family::Family;
use crate::kernel::KernelSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Cap for the GEE step. Rebuilding the working matrices at each beta
    /// makes that iteration converge linearly, sometimes slowly.
    pub gee_max_iter: usize,
    pub max_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-8,
            max_iter: 100,
            gee_max_iter: 500,
            max_halvings: 50,
        }
    }
}

/// Probit fits with every member of one class beyond this |x'beta| are
/// treated as separated.
pub const SEPARATION_ETA: f64 = 30.0;

#[derive(Debug, Clone)]
pub struct PqmleResult {
    pub family: Family,
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of the summed pooled score at `beta`.
    pub score_norm: f64,
    pub loglik: f64,
    pub separation: bool,
    pub residuals: DVector<f64>,
    pub std_residuals: DVector<f64>,
    pub fitted_means: DVector<f64>,
    pub fitted_variances: DVector<f64>,
}

/// Per-row quantities at a given beta.
pub(crate) struct RowEval {
    pub eta: DVector<f64>,
    pub mean: DVector<f64>,
    pub dmean: DVector<f64>,
    pub var: DVector<f64>,
}

pub(crate) fn eval_rows(ds: &Dataset, f: &Family, beta: &DVector<f64>) -> Result<RowEval> {
    let eta = ds.linear_index(beta);
    let n = eta.len();
    let mut mean = DVector::zeros(n);
    let mut dmean = DVector::zeros(n);
    let mut var = DVector::zeros(n);
    for i in 0..n {
        let (m, v) = f.mean_var_eta(eta[i])?;
        mean[i] = m;
        var[i] = v;
        dmean[i] = f.dmean_eta(eta[i])?;
    }
    Ok(RowEval { eta, mean, dmean, var })
}

/// Sum of per-observation log-likelihoods.
pub fn pooled_loglik(ds: &Dataset, f: &Family, beta: &DVector<f64>) -> Result<f64> {
    let eta = ds.linear_index(beta);
    let mut total = 0.0;
    for i in 0..ds.n() {
        total += f.loglik_eta(ds.y()[i], eta[i])?;
    }
    Ok(total)
}

/// Sum of per-observation quasi log-likelihoods (gradient = pooled score).
pub fn pooled_quasi_loglik(ds: &Dataset, f: &Family, beta: &DVector<f64>) -> Result<f64> {
    let eta = ds.linear_index(beta);
    let mut total = 0.0;
    for i in 0..ds.n() {
        total += f.quasi_loglik_eta(ds.y()[i], eta[i])?;
    }
    Ok(total)
}

/// Summed LEF score sum_i grad m_i (y_i - m_i) / v_i.
pub fn pooled_score(ds: &Dataset, f: &Family, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let eta = ds.linear_index(beta);
    let mut w = DVector::zeros(ds.n());
    for i in 0..ds.n() {
        w[i] = f.score_weight_eta(ds.y()[i], eta[i])?;
    }
    Ok(ds.x().tr_mul(&w))
}

/// Expected information sum_i grad m_i' grad m_i / v_i.
fn expected_information(x: &DMatrix<f64>, ev: &RowEval) -> DMatrix<f64> {
    let mut xs = x.clone();
    for i in 0..x.nrows() {
        let c = ev.dmean[i] / ev.var[i].sqrt();
        xs.row_mut(i).scale_mut(c);
    }
    xs.tr_mul(&xs)
}

/// Modified Gram-Schmidt in column order; returns the columns that are
/// (numerically) linear combinations of earlier ones.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm0 = col.norm();
        let mut r = col;
        for q in &basis {
            let c = q.dot(&r);
            r.axpy(-c, q, 1.0);
        }
        let norm = r.norm();
        if norm0 == 0.0 || norm <= 1e-9 * norm0 {
            dependent.push(j);
        } else {
            basis.push(r / norm);
        }
    }
    dependent
}

pub(crate) fn check_rank(ds: &Dataset) -> Result<()> {
    let dep = dependent_columns(ds.x());
    if dep.is_empty() {
        return Ok(());
    }
    Err(Error::RankDeficient {
        columns: dep.iter().map(|&j| ds.covariate_names()[j].clone()).collect(),
    })
}

fn starting_values(ds: &Dataset, f: &Family) -> DVector<f64> {
    let mut beta = DVector::zeros(ds.p());
    if let Some(j) = ds.intercept_column() {
        if let Some(v) = f.link(ds.y().mean()) {
            beta[j] = v;
        }
    }
    beta
}

pub fn fit_pqmle(ds: &Dataset, f: &Family, opts: &SolverOptions) -> Result<PqmleResult> {
    fit_pqmle_from(ds, f, opts, starting_values(ds, f))
}

/// Fisher scoring with step-halving on the pooled quasi log-likelihood,
/// started at `start`.
pub fn fit_pqmle_from(ds: &Dataset, f: &Family, opts: &SolverOptions, start: DVector<f64>) -> Result<PqmleResult> {
    f.validate(ds)?;
    check_rank(ds)?;
    if start.len() != ds.p() {
        return Err(Error::InvalidArgument(format!(
            "start vector has length {}, expected {}",
            start.len(),
            ds.p()
        )));
    }
    let n = ds.n() as f64;
    let mut beta = start;
    let mut obj = pooled_quasi_loglik(ds, f, &beta)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;

    while iterations < opts.max_iter {
        let ev = eval_rows(ds, f, &beta)?;
        let score = pooled_score(ds, f, &beta)?;
        let score_norm = score.amax();
        if last_step <= opts.tol && score_norm / n <= opts.tol {
            converged = true;
            break;
        }
        iterations += 1;
        let info = expected_information(ds.x(), &ev);
        let step = match info.cholesky() {
            Some(ch) => ch.solve(&score),
            // probit information vanishes as the index runs off to infinity
            None if probit_separated(ds, f, &ev.eta) => break,
            None => return Err(Error::Singular("pooled information matrix".into())),
        };

        let mut t = 1.0;
        let mut accepted = None;
        let mut saw_non_finite = false;
        for _ in 0..=opts.max_halvings {
            let trial = &beta + &step * t;
            match pooled_quasi_loglik(ds, f, &trial) {
                Ok(v) if v.is_finite() => {
                    // ascent, allowing for rounding in the summed objective
                    if v >= obj - 1e-12 * (1.0 + obj.abs()) {
                        accepted = Some((trial, v));
                        break;
                    }
                }
                _ => saw_non_finite = true,
            }
            t *= 0.5;
        }
        match accepted {
            Some((b, v)) => {
                last_step = (&b - &beta).amax();
                beta = b;
                obj = v;
            }
            None if saw_non_finite && t * step.amax() > opts.tol => {
                return Err(Error::Divergence(format!(
                    "log-likelihood not finite after {} step halvings",
                    opts.max_halvings
                )));
            }
            None => {
                // No ascent available at machine precision: we are at the
                // optimum up to rounding. Decide by the score alone.
                converged = score_norm / n <= opts.tol;
                break;
            }
        }
    }

    let ev = eval_rows(ds, f, &beta)?;
    let score_norm = pooled_score(ds, f, &beta)?.amax();
    if iterations >= opts.max_iter && !converged {
        converged = last_step <= opts.tol && score_norm / n <= opts.tol;
    }
    let separation = probit_separated(ds, f, &ev.eta);
    if separation {
        converged = false;
        log::warn!("probit fit shows complete separation; marking as not converged");
    }
    let residuals = ds.y() - &ev.mean;
    let std_residuals = residuals.zip_map(&ev.var, |u, v| u / v.sqrt());
    Ok(PqmleResult {
        family: *f,
        beta: beta.clone(),
        iterations,
        converged,
        score_norm,
        loglik: pooled_loglik(ds, f, &beta)?,
        separation,
        residuals,
        std_residuals,
        fitted_means: ev.mean,
        fitted_variances: ev.var,
    })
}

fn probit_separated(ds: &Dataset, f: &Family, eta: &DVector<f64>) -> bool {
    if !matches!(f, Family::BernoulliProbit) {
        return false;
    }
    let y = ds.y();
    let class_far = |cls: f64| {
        let mut members = (0..ds.n()).filter(|&i| y[i] == cls).peekable();
        members.peek().is_some() && members.all(|i| eta[i].abs() > SEPARATION_ETA)
    };
    class_far(0.0) || class_far(1.0)
}

/// Pairwise-kernel sandwich A^-1 B A^-1 with
/// A = sum grad m_i' grad m_i / v_i and
/// B = sum_i sum_j k(d_ij) s_i s_j', s_i = grad m_i' u_i / v_i.
/// The i = j terms always carry weight 1.
pub fn robust_avar_pqmle(ds: &Dataset, res: &PqmleResult, kernel: &KernelSpec) -> Result<DMatrix<f64>> {
    if !res.converged {
        return Err(Error::InvalidArgument(
            "robust variance requested for a non-converged fit".into(),
        ));
    }
    let f = &res.family;
    let ev = eval_rows(ds, f, &res.beta)?;
    let bread = expected_information(ds.x(), &ev);
    let bread_inv = bread
        .cholesky()
        .ok_or_else(|| Error::Singular("PQMLE bread matrix".into()))?
        .inverse();
    let n = ds.n();
    let p = ds.p();
    // scores as rows of an n x p matrix
    let mut s = ds.x().clone();
    for i in 0..n {
        let w = ev.dmean[i] * res.residuals[i] / ev.var[i];
        s.row_mut(i).scale_mut(w);
    }
    // B = S' K S with K the kernel matrix; build K S row by row
    let mut ks = s.clone();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = kernel.weight(ds.pairwise_distance(i, j));
            if k != 0.0 {
                for c in 0..p {
                    ks[(i, c)] += k * s[(j, c)];
                }
            }
        }
    }
    let meat = s.tr_mul(&ks);
    let meat = (&meat + meat.transpose()) * 0.5;
    let avar = &bread_inv * meat * &bread_inv;
    Ok((&avar + avar.transpose()) * 0.5)
}

#[derive(Debug, Clone)]
pub struct OlsResult {
    pub beta: DVector<f64>,
    pub se_classical: DVector<f64>,
    /// HC1 heteroskedasticity-robust standard errors.
    pub se_robust: DVector<f64>,
    pub residuals: DVector<f64>,
    pub n_used: usize,
    pub n_dropped: usize,
}

/// OLS of ln(y) on X, dropping rows with y <= 0.
pub fn ols_loglinear(ds: &Dataset) -> Result<OlsResult> {
    let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.y()[i] > 0.0).collect();
    let n_dropped = ds.n() - rows.len();
    let p = ds.p();
    if rows.len() < p {
        return Err(Error::InvalidArgument(format!(
            "only {} positive responses for {p} coefficients",
            rows.len()
        )));
    }
    if n_dropped > 0 {
        log::info!("OLS on ln(y): dropped {n_dropped} rows with y <= 0");
    }
    let x = ds.x().select_rows(&rows);
    let dep = dependent_columns(&x);
    if !dep.is_empty() {
        return Err(Error::RankDeficient {
            columns: dep.iter().map(|&j| ds.covariate_names()[j].clone()).collect(),
        });
    }
    let ly = DVector::from_iterator(rows.len(), rows.iter().map(|&i| ds.y()[i].ln()));
    let qr = x.clone().qr();
    let qty = qr.q().tr_mul(&ly);
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Singular("OLS R factor".into()))?;
    let residuals = &ly - &x * &beta;
    let n = rows.len() as f64;
    let df = n - p as f64;
    let xtx_inv = x
        .tr_mul(&x)
        .cholesky()
        .ok_or_else(|| Error::Singular("X'X".into()))?
        .inverse();
    let s2 = if df > 0.0 {
        residuals.norm_squared() / df
    } else {
        f64::NAN
    };
    let se_classical = xtx_inv.diagonal().map(|v| (v * s2).sqrt());
    let mut xu = x.clone();
    for i in 0..rows.len() {
        xu.row_mut(i).scale_mut(residuals[i]);
    }
    let meat = xu.tr_mul(&xu);
    let hc1 = if df > 0.0 { n / df } else { f64::NAN };
    let robust = &xtx_inv * meat * &xtx_inv * hc1;
    let se_robust = robust.diagonal().map(f64::sqrt);
    Ok(OlsResult {
        beta,
        se_classical,
        se_robust,
        residuals,
        n_used: rows.len(),
        n_dropped,
    })
}
