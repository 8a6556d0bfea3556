//! Second-step GEE: Fisher scoring on the group quasi-score, the
//! group-kernel sandwich, and average partial effects.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroupIndex};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::kernel::KernelSpec;
use crate::pqmle::{PqmleResult, SolverOptions};
use crate::working::{build_weight_matrices, SpatialParams, WeightMatrixSet, WeightMode};

/// Group-level pieces at a given beta: residuals and mean gradients.
struct GroupEval {
    resid: DVector<f64>,
    grad: DMatrix<f64>,
}

fn eval_group(ds: &Dataset, f: &Family, eta: &DVector<f64>, members: &[usize]) -> Result<GroupEval> {
    let l = members.len();
    let p = ds.p();
    let mut resid = DVector::zeros(l);
    let mut grad = DMatrix::zeros(l, p);
    for (a, &i) in members.iter().enumerate() {
        resid[a] = ds.y()[i] - f.mean_eta(eta[i])?;
        let dm = f.dmean_eta(eta[i])?;
        for c in 0..p {
            grad[(a, c)] = dm * ds.x()[(i, c)];
        }
    }
    Ok(GroupEval { resid, grad })
}

fn check_alignment(gi: &GroupIndex, wm: &WeightMatrixSet) -> Result<()> {
    if gi.len() != wm.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weight matrices for {} groups",
            wm.len(),
            gi.len()
        )));
    }
    for g in 0..gi.len() {
        if wm.group(g).w.nrows() != gi.members(g).len() {
            return Err(Error::InvalidArgument(format!(
                "weight matrix size mismatch in group {g}"
            )));
        }
    }
    Ok(())
}

/// Q_G = (1/G) sum_g (y_g - m_g)' W_g^-1 (y_g - m_g).
pub fn gee_objective(
    ds: &Dataset,
    gi: &GroupIndex,
    f: &Family,
    beta: &DVector<f64>,
    wm: &WeightMatrixSet,
) -> Result<f64> {
    check_alignment(gi, wm)?;
    let eta = ds.linear_index(beta);
    let mut total = 0.0;
    for (g, members) in gi.groups().iter().enumerate() {
        let ge = eval_group(ds, f, &eta, members)?;
        total += ge.resid.dot(&wm.solve(g, &ge.resid));
    }
    Ok(total / gi.len() as f64)
}

/// S_G = (1/G) sum_g grad m_g' W_g^-1 (y_g - m_g).
pub fn quasi_score(
    ds: &Dataset,
    gi: &GroupIndex,
    f: &Family,
    beta: &DVector<f64>,
    wm: &WeightMatrixSet,
) -> Result<DVector<f64>> {
    Ok(score_and_information(ds, gi, f, beta, wm)?.0)
}

/// (S_G, sum_g grad m_g' W_g^-1 grad m_g, scale) where scale is the
/// largest (1/G) sum_g |s_gj|, the size of the terms S_G is summed from.
fn score_and_information(
    ds: &Dataset,
    gi: &GroupIndex,
    f: &Family,
    beta: &DVector<f64>,
    wm: &WeightMatrixSet,
) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
    check_alignment(gi, wm)?;
    let p = ds.p();
    let eta = ds.linear_index(beta);
    let mut score = DVector::zeros(p);
    let mut abs_sum = DVector::<f64>::zeros(p);
    let mut info = DMatrix::zeros(p, p);
    for (g, members) in gi.groups().iter().enumerate() {
        let ge = eval_group(ds, f, &eta, members)?;
        let winv_d = wm.solve_mat(g, &ge.grad);
        let s_g = winv_d.tr_mul(&ge.resid);
        abs_sum += s_g.abs();
        score += s_g;
        info += ge.grad.tr_mul(&winv_d);
    }
    let info = (&info + info.transpose()) * 0.5;
    let g_count = gi.len() as f64;
    Ok((score / g_count, info, abs_sum.max() / g_count))
}

/// Score test used for convergence: |S_G| <= tol, or <= tol times the
/// magnitude of its summands when those are large (counts in the
/// thousands leave S_G with a rounding floor well above an absolute tol).
fn score_small(score_norm: f64, scale: f64, tol: f64) -> bool {
    score_norm <= tol * scale.max(1.0)
}

/// Hessian of sum_g q_g with W frozen, split as H1 + H2:
/// H1 = 2 sum grad m' W^-1 grad m, H2 = -2 sum_l (W^-1 u)_l m''(eta_l) x_l x_l'.
pub fn frozen_hessian(
    ds: &Dataset,
    gi: &GroupIndex,
    f: &Family,
    beta: &DVector<f64>,
    wm: &WeightMatrixSet,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_alignment(gi, wm)?;
    let p = ds.p();
    let eta = ds.linear_index(beta);
    let mut h1 = DMatrix::zeros(p, p);
    let mut h2 = DMatrix::zeros(p, p);
    for (g, members) in gi.groups().iter().enumerate() {
        let ge = eval_group(ds, f, &eta, members)?;
        h1 += ge.grad.tr_mul(&wm.solve_mat(g, &ge.grad)) * 2.0;
        let wu = wm.solve(g, &ge.resid);
        for (a, &i) in members.iter().enumerate() {
            let c = -2.0 * wu[a] * f.d2mean_eta(eta[i])?;
            let xi = ds.x().row(i);
            h2 += xi.transpose() * xi * c;
        }
    }
    Ok((h1, h2))
}

#[derive(Debug, Clone)]
pub struct GeeResult {
    pub family: Family,
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm of S_G at `beta`.
    pub score_norm: f64,
    pub objective: f64,
    pub spatial: SpatialParams,
    pub mode: WeightMode,
    pub weights: WeightMatrixSet,
    /// Finite-sample covariance of beta (already includes the 1/G), so
    /// `se = sqrt(diag(avar))`.
    pub avar: Option<DMatrix<f64>>,
    pub se: Option<DVector<f64>>,
    pub kernel: Option<KernelSpec>,
}

impl GeeResult {
    /// Computes the sandwich covariance and stores it with its s.e.
    pub fn attach_sandwich(&mut self, ds: &Dataset, gi: &GroupIndex, kernel: &KernelSpec) -> Result<()> {
        let avar = sandwich_avar(ds, gi, self, kernel)?;
        self.se = Some(avar.diagonal().map(|v| v.max(0.0).sqrt()));
        self.avar = Some(avar);
        self.kernel = Some(*kernel);
        Ok(())
    }
}

/// Two-step GEE: the spatial parameters stay at `sp` while the variance part
/// of W_g(beta, sp) follows the current beta. Fisher scoring from
/// first.beta; a step is halved until the scaled score S' A^-1 S drops.
pub fn gee_fit(
    ds: &Dataset,
    gi: &GroupIndex,
    f: &Family,
    first: &PqmleResult,
    sp: &SpatialParams,
    mode: WeightMode,
    opts: &SolverOptions,
) -> Result<GeeResult> {
    if !first.converged {
        return Err(Error::InvalidArgument("first-step fit did not converge".into()));
    }
    let g_count = gi.len() as f64;
    let eval = |b: &DVector<f64>| -> Result<(WeightMatrixSet, DVector<f64>, f64, DVector<f64>)> {
        let wm = build_weight_matrices(ds, gi, f, b, sp, mode)?;
        let (score, info, scale) = score_and_information(ds, gi, f, b, &wm)?;
        let step = info
            .cholesky()
            .ok_or_else(|| Error::Singular("GEE scoring matrix".into()))?
            .solve(&(&score * g_count));
        Ok((wm, score, scale, step))
    };
    let mut beta = first.beta.clone();
    let (mut wm, mut score, mut scale, mut step) = eval(&beta)?;
    let mut dec = score.dot(&step);
    let mut converged = false;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;

    while iterations < opts.gee_max_iter {
        if last_step <= opts.tol && score_small(score.amax(), scale, opts.tol) {
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &beta + &step * t;
            if let Ok((w_t, s_t, sc_t, st_t)) = eval(&trial) {
                let d_t = s_t.dot(&st_t);
                if d_t.is_finite() && d_t <= dec + 1e-12 * (1.0 + dec.abs()) {
                    accepted = Some((trial, w_t, s_t, sc_t, st_t, d_t));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((b, w_t, s_t, sc_t, st_t, d_t)) => {
                last_step = (&b - &beta).amax();
                beta = b;
                wm = w_t;
                score = s_t;
                scale = sc_t;
                step = st_t;
                dec = d_t;
            }
            None => break,
        }
    }
    let score_norm = score.amax();
    if !converged {
        converged = last_step <= opts.tol && score_small(score_norm, scale, opts.tol);
    }
    let objective = gee_objective(ds, gi, f, &beta, &wm)?;
    Ok(GeeResult {
        family: *f,
        beta,
        iterations,
        converged,
        score_norm,
        objective,
        spatial: *sp,
        mode,
        weights: wm,
        avar: None,
        se: None,
        kernel: None,
    })
}

/// GEE with the working matrices held fixed at `wm`: Fisher scoring with
/// halving on Q_G.
#[allow(clippy::too_many_arguments)]
pub fn gee_fit_with_weights(
    ds: &Dataset,
    gi: &GroupIndex,
    f: &Family,
    start: DVector<f64>,
    wm: WeightMatrixSet,
    sp: &SpatialParams,
    mode: WeightMode,
    opts: &SolverOptions,
) -> Result<GeeResult> {
    check_alignment(gi, &wm)?;
    let mut beta = start;
    let mut obj = gee_objective(ds, gi, f, &beta, &wm)?;
    let mut converged = false;
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    let g_count = gi.len() as f64;

    while iterations < opts.gee_max_iter {
        let (score, info, scale) = score_and_information(ds, gi, f, &beta, &wm)?;
        if last_step <= opts.tol && score_small(score.amax(), scale, opts.tol) {
            converged = true;
            break;
        }
        iterations += 1;
        let step = info
            .cholesky()
            .ok_or_else(|| Error::Singular("GEE scoring matrix".into()))?
            .solve(&(score * g_count));
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let trial = &beta + &step * t;
            if let Ok(v) = gee_objective(ds, gi, f, &trial, &wm) {
                if v.is_finite() && v <= obj + 1e-12 * (1.0 + obj.abs()) {
                    accepted = Some((trial, v));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((b, v)) => {
                last_step = (&b - &beta).amax();
                beta = b;
                obj = v;
            }
            None => break,
        }
    }
    let (score, _, scale) = score_and_information(ds, gi, f, &beta, &wm)?;
    let score_norm = score.amax();
    if !converged {
        converged = last_step <= opts.tol && score_small(score_norm, scale, opts.tol);
    }
    Ok(GeeResult {
        family: *f,
        beta,
        iterations,
        converged,
        score_norm,
        objective: obj,
        spatial: *sp,
        mode,
        weights: wm,
        avar: None,
        se: None,
        kernel: None,
    })
}

/// 1.5 x the median nearest-neighbour group distance.
pub fn default_bandwidth(group_distances: &DMatrix<f64>) -> f64 {
    let g = group_distances.nrows();
    if g < 2 {
        return 1.0;
    }
    let mut nn: Vec<f64> = (0..g)
        .map(|a| {
            (0..g)
                .filter(|&b| b != a)
                .map(|b| group_distances[(a, b)])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let med = if g % 2 == 1 {
        nn[g / 2]
    } else {
        0.5 * (nn[g / 2 - 1] + nn[g / 2])
    };
    if med > 0.0 {
        1.5 * med
    } else {
        1.0
    }
}

/// A^-1 B A^-1 with A = sum grad m_g' W_g^-1 grad m_g and
/// B = sum_g s_g s_g' + sum_g sum_{h != g} k(d_gh) s_g s_h',
/// s_g = grad m_g' W_g^-1 u_g, all at the GEE estimate.
pub fn sandwich_avar(ds: &Dataset, gi: &GroupIndex, result: &GeeResult, kernel: &KernelSpec) -> Result<DMatrix<f64>> {
    let gd = ds.group_distance_matrix(gi);
    sandwich_avar_with_distances(ds, gi, result, kernel, &gd)
}

pub fn sandwich_avar_with_distances(
    ds: &Dataset,
    gi: &GroupIndex,
    result: &GeeResult,
    kernel: &KernelSpec,
    group_distances: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if !result.converged {
        return Err(Error::InvalidArgument(
            "sandwich requested for a non-converged GEE fit".into(),
        ));
    }
    group_sandwich(
        ds,
        gi,
        &result.family,
        &result.beta,
        &result.weights,
        kernel,
        group_distances,
    )
}

/// The sandwich at an arbitrary beta and working-matrix set. With
/// independence working matrices this is the group-kernel covariance of the
/// pooled estimator.
pub fn group_sandwich(
    ds: &Dataset,
    gi: &GroupIndex,
    f: &Family,
    beta: &DVector<f64>,
    wm: &WeightMatrixSet,
    kernel: &KernelSpec,
    group_distances: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_alignment(gi, wm)?;
    if group_distances.nrows() != gi.len() || group_distances.ncols() != gi.len() {
        return Err(Error::InvalidArgument(
            "group distance matrix does not match the grouping".into(),
        ));
    }
    let p = ds.p();
    let g_count = gi.len();
    let eta = ds.linear_index(beta);
    let mut a = DMatrix::zeros(p, p);
    let mut scores = DMatrix::zeros(g_count, p);
    for (g, members) in gi.groups().iter().enumerate() {
        let ge = eval_group(ds, f, &eta, members)?;
        let winv_d = wm.solve_mat(g, &ge.grad);
        a += ge.grad.tr_mul(&winv_d);
        let s = winv_d.tr_mul(&ge.resid);
        scores.row_mut(g).copy_from(&s.transpose());
    }
    let a = (&a + a.transpose()) * 0.5;
    let a_inv = a
        .cholesky()
        .ok_or_else(|| Error::Singular("GEE bread matrix".into()))?
        .inverse();
    // K S with own-group weight exactly 1
    let mut ks = scores.clone();
    for g in 0..g_count {
        for h in 0..g_count {
            if g == h {
                continue;
            }
            let k = kernel.weight(group_distances[(g, h)]);
            if k != 0.0 {
                for c in 0..p {
                    ks[(g, c)] += k * scores[(h, c)];
                }
            }
        }
    }
    let b = scores.tr_mul(&ks);
    let b = (&b + b.transpose()) * 0.5;
    let avar = &a_inv * b * &a_inv;
    Ok((&avar + avar.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EffectKind {
    Continuous,
    /// x_K moved from `from` to `from + 1` for every observation.
    Discrete {
        from: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartialEffect {
    pub estimate: f64,
    pub se: f64,
}

/// Average partial effect of covariate `which` with a delta-method s.e.
pub fn partial_effects(
    f: &Family,
    beta: &DVector<f64>,
    avar: &DMatrix<f64>,
    ds: &Dataset,
    which: usize,
    kind: EffectKind,
) -> Result<PartialEffect> {
    let p = ds.p();
    if which >= p {
        return Err(Error::InvalidArgument(format!(
            "covariate index {which} out of range (p={p})"
        )));
    }
    let n = ds.n();
    let x = ds.x();
    let mut total = 0.0;
    let mut jac = DVector::zeros(p);
    match kind {
        EffectKind::Continuous => {
            for i in 0..n {
                let xi = x.row(i);
                let eta = xi.dot(&beta.transpose());
                let dm = f.dmean_eta(eta)?;
                let d2m = f.d2mean_eta(eta)?;
                total += dm * beta[which];
                for c in 0..p {
                    jac[c] += d2m * beta[which] * xi[c];
                }
                jac[which] += dm;
            }
        }
        EffectKind::Discrete { from } => {
            let col = x.column(which);
            if col.iter().any(|&v| v != 0.0 && v != 1.0) {
                log::warn!(
                    "discrete partial effect requested for non-binary covariate {}",
                    ds.covariate_names()[which]
                );
            }
            for i in 0..n {
                let mut x0: Vec<f64> = x.row(i).iter().cloned().collect();
                x0[which] = from;
                let mut x1 = x0.clone();
                x1[which] = from + 1.0;
                let e0 = crate::family::dot(&x0, beta);
                let e1 = crate::family::dot(&x1, beta);
                total += f.mean_eta(e1)? - f.mean_eta(e0)?;
                let (d0, d1) = (f.dmean_eta(e0)?, f.dmean_eta(e1)?);
                for c in 0..p {
                    jac[c] += d1 * x1[c] - d0 * x0[c];
                }
            }
        }
    }
    let estimate = total / n as f64;
    jac /= n as f64;
    let var = (jac.transpose() * avar * &jac)[(0, 0)];
    Ok(PartialEffect {
        estimate,
        se: var.max(0.0).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{block_grouping, DistanceMetric};
    use crate::pqmle::{fit_pqmle, pooled_score};
    use crate::working::CorrelationModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lattice_data(side: usize, f: &Family, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = side * side;
        let coords: Vec<[f64; 2]> = (0..n).map(|i| [(i / side + 1) as f64, (i % side + 1) as f64]).collect();
        let groups = block_grouping(side, 4).unwrap();
        let mut x = DMatrix::from_element(n, 3, 1.0);
        let mut y = DVector::zeros(n);
        // shared group shock to give the working matrices something to do
        let shocks: Vec<f64> = (0..n / 4)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.5)
            .collect();
        for i in 0..n {
            x[(i, 1)] = rng.random_range(-1.0..1.0);
            x[(i, 2)] = rng.random_range(0.0..1.0);
            let eta = 0.3 + 0.7 * x[(i, 1)] - 0.4 * x[(i, 2)] + shocks[groups[i]];
            y[i] = if f.is_count() {
                rng.sample(rand_distr::Poisson::new(eta.exp()).unwrap())
            } else {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                if eta + z > 0.5 {
                    1.0
                } else {
                    0.0
                }
            };
        }
        Dataset::new(y, x, coords, groups, DistanceMetric::Euclidean).unwrap()
    }

    fn exch(pi: f64) -> SpatialParams {
        SpatialParams::new(0.0, CorrelationModel::Exchangeable { pi }).unwrap()
    }

    #[test]
    fn objective_small_cases() {
        let ds = Dataset::new(
            DVector::from_vec(vec![2.0, 0.0]),
            DMatrix::from_element(2, 1, 1.0),
            vec![[0.0, 0.0], [1.0, 0.0]],
            vec![0, 0],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        let gi = ds.group_index();
        let wm = WeightMatrixSet::from_matrices(vec![DMatrix::identity(2, 2)]).unwrap();
        // m = 1 at beta = 0, residuals (1, -1)
        let beta = DVector::zeros(1);
        assert_eq!(gee_objective(&ds, &gi, &Family::Poisson, &beta, &wm).unwrap(), 2.0);
        let exact = Dataset::new(
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::from_element(2, 1, 1.0),
            vec![[0.0, 0.0], [1.0, 0.0]],
            vec![0, 0],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        assert_eq!(gee_objective(&exact, &gi, &Family::Poisson, &beta, &wm).unwrap(), 0.0);
        assert!(quasi_score(&exact, &gi, &Family::Poisson, &beta, &wm).unwrap().amax() == 0.0);
    }

    #[test]
    fn objective_and_score_match_loop_oracle() {
        let f = Family::Poisson;
        let ds = lattice_data(4, &f, 1);
        let gi = ds.group_index();
        let beta = DVector::from_vec(vec![0.2, 0.5, -0.1]);
        let wm = build_weight_matrices(&ds, &gi, &f, &beta, &exch(0.3), WeightMode::GenericCorrelation).unwrap();
        let (mut q, mut s) = (0.0, DVector::<f64>::zeros(3));
        for g in 0..gi.len() {
            let m = gi.members(g);
            let winv = wm.group(g).w.clone().try_inverse().unwrap();
            for (a, &i) in m.iter().enumerate() {
                for (b, &j) in m.iter().enumerate() {
                    let ei = ds.x().row(i).dot(&beta.transpose());
                    let ej = ds.x().row(j).dot(&beta.transpose());
                    let ui = ds.y()[i] - ei.exp();
                    let uj = ds.y()[j] - ej.exp();
                    q += ui * winv[(a, b)] * uj;
                    for c in 0..3 {
                        s[c] += ei.exp() * ds.x()[(i, c)] * winv[(a, b)] * uj;
                    }
                }
            }
        }
        let g = gi.len() as f64;
        let got_q = gee_objective(&ds, &gi, &f, &beta, &wm).unwrap();
        let got_s = quasi_score(&ds, &gi, &f, &beta, &wm).unwrap();
        assert!(((got_q - q / g) / got_q).abs() < 1e-12);
        assert!((&got_s - s / g).amax() < 1e-12 * got_s.amax());
    }

    #[test]
    fn score_is_half_negative_gradient_of_objective() {
        for f in [Family::Poisson, Family::BernoulliProbit, Family::negbin2(0.5).unwrap()] {
            let ds = lattice_data(4, &f, 2);
            let gi = ds.group_index();
            let beta = DVector::from_vec(vec![0.1, 0.4, -0.2]);
            let wm = build_weight_matrices(&ds, &gi, &f, &beta, &exch(0.4), WeightMode::GenericCorrelation).unwrap();
            let s = quasi_score(&ds, &gi, &f, &beta, &wm).unwrap();
            let h = 1e-6;
            for j in 0..3 {
                let mut bp = beta.clone();
                let mut bm = beta.clone();
                bp[j] += h;
                bm[j] -= h;
                let fd = (gee_objective(&ds, &gi, &f, &bp, &wm).unwrap()
                    - gee_objective(&ds, &gi, &f, &bm, &wm).unwrap())
                    / (2.0 * h);
                assert!((-0.5 * fd - s[j]).abs() < 1e-5 * s.amax(), "{f:?}");
            }
        }
    }

    #[test]
    fn frozen_hessian_matches_fd_of_score() {
        let f = Family::BernoulliProbit;
        let ds = lattice_data(4, &f, 3);
        let gi = ds.group_index();
        let beta = DVector::from_vec(vec![0.1, 0.4, -0.2]);
        let wm = build_weight_matrices(&ds, &gi, &f, &beta, &exch(0.2), WeightMode::GenericCorrelation).unwrap();
        let (h1, h2) = frozen_hessian(&ds, &gi, &f, &beta, &wm).unwrap();
        let h = h1 + h2;
        let g = gi.len() as f64;
        let step = 1e-6;
        for j in 0..3 {
            let mut bp = beta.clone();
            let mut bm = beta.clone();
            bp[j] += step;
            bm[j] -= step;
            // d(sum q)/d beta = -2 G S
            let col = (quasi_score(&ds, &gi, &f, &bp, &wm).unwrap() - quasi_score(&ds, &gi, &f, &bm, &wm).unwrap())
                * (-2.0 * g / (2.0 * step));
            assert!((col - h.column(j)).amax() < 1e-5 * h.amax());
        }
    }

    #[test]
    fn independence_reduces_to_pooled_score_and_estimate() {
        for f in [Family::Poisson, Family::BernoulliProbit] {
            let ds = lattice_data(6, &f, 4);
            let gi = ds.group_index();
            let beta = DVector::from_vec(vec![0.2, 0.3, 0.1]);
            let sp = SpatialParams::independence();
            let wm = build_weight_matrices(&ds, &gi, &f, &beta, &sp, WeightMode::GenericCorrelation).unwrap();
            let s = quasi_score(&ds, &gi, &f, &beta, &wm).unwrap();
            let pooled = pooled_score(&ds, &f, &beta).unwrap() / gi.len() as f64;
            assert!((s - &pooled).amax() < 1e-10 * pooled.amax());

            let first = fit_pqmle(&ds, &f, &SolverOptions::default()).unwrap();
            let fit = gee_fit(
                &ds,
                &gi,
                &f,
                &first,
                &sp,
                WeightMode::GenericCorrelation,
                &SolverOptions::default(),
            )
            .unwrap();
            assert!(fit.converged);
            assert!((&fit.beta - &first.beta).amax() < 1e-6);
        }
    }

    #[test]
    fn scaling_weights_leaves_estimate_unchanged() {
        let f = Family::Poisson;
        let ds = lattice_data(6, &f, 5);
        let gi = ds.group_index();
        let first = fit_pqmle(&ds, &f, &SolverOptions::default()).unwrap();
        let sp = exch(0.35);
        let wm = build_weight_matrices(&ds, &gi, &f, &first.beta, &sp, WeightMode::GenericCorrelation).unwrap();
        let opts = SolverOptions::default();
        let a = gee_fit_with_weights(
            &ds,
            &gi,
            &f,
            first.beta.clone(),
            wm.clone(),
            &sp,
            WeightMode::GenericCorrelation,
            &opts,
        )
        .unwrap();
        let b = gee_fit_with_weights(
            &ds,
            &gi,
            &f,
            first.beta.clone(),
            wm.scaled(7.5).unwrap(),
            &sp,
            WeightMode::GenericCorrelation,
            &opts,
        )
        .unwrap();
        assert!(a.converged && b.converged);
        assert!((a.beta - b.beta).amax() < 1e-8);
    }

    #[test]
    fn tiny_instance_matches_grid_minimizer() {
        // G = 3, L = 2, p = 2
        let f = Family::Poisson;
        let ds = Dataset::new(
            DVector::from_vec(vec![1.0, 3.0, 0.0, 2.0, 4.0, 1.0]),
            DMatrix::from_row_slice(6, 2, &[1.0, -0.5, 1.0, 0.8, 1.0, -1.0, 1.0, 0.3, 1.0, 1.0, 1.0, 0.0]),
            vec![[0.0, 0.0], [0.0, 1.0], [5.0, 0.0], [5.0, 1.0], [10.0, 0.0], [10.0, 1.0]],
            vec![0, 0, 1, 1, 2, 2],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        let gi = ds.group_index();
        let first = fit_pqmle(&ds, &f, &SolverOptions::default()).unwrap();
        let sp = exch(0.4);
        let mode = WeightMode::GenericCorrelation;
        let frozen = build_weight_matrices(&ds, &gi, &f, &first.beta, &sp, mode).unwrap();
        let fit = gee_fit_with_weights(
            &ds,
            &gi,
            &f,
            first.beta.clone(),
            frozen,
            &sp,
            mode,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        let wm = &fit.weights;
        let step = 6.0 / 2000.0;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for a in 0..=2000 {
            for b in 0..=2000 {
                let beta = DVector::from_vec(vec![-3.0 + step * a as f64, -3.0 + step * b as f64]);
                let v = gee_objective(&ds, &gi, &f, &beta, wm).unwrap();
                if v < best.0 {
                    best = (v, beta[0], beta[1]);
                }
            }
        }
        assert!((fit.beta[0] - best.1).abs() <= step && (fit.beta[1] - best.2).abs() <= step);
    }

    #[test]
    fn fitted_beta_solves_score_with_weights_at_beta() {
        for f in [Family::Poisson, Family::BernoulliProbit] {
            let ds = lattice_data(6, &f, 8);
            let gi = ds.group_index();
            let first = fit_pqmle(&ds, &f, &SolverOptions::default()).unwrap();
            let sp = exch(0.3);
            let mode = WeightMode::GenericCorrelation;
            let fit = gee_fit(&ds, &gi, &f, &first, &sp, mode, &SolverOptions::default()).unwrap();
            assert!(fit.converged);
            let wm = build_weight_matrices(&ds, &gi, &f, &fit.beta, &sp, mode).unwrap();
            assert!(quasi_score(&ds, &gi, &f, &fit.beta, &wm).unwrap().amax() < 1e-8);
        }
    }

    /// Clustered sandwich from explicit inverses and loops.
    fn clustered_oracle(ds: &Dataset, gi: &GroupIndex, fit: &GeeResult) -> DMatrix<f64> {
        let p = ds.p();
        let f = fit.family;
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut b = DMatrix::<f64>::zeros(p, p);
        for g in 0..gi.len() {
            let m = gi.members(g);
            let winv = fit.weights.group(g).w.clone().try_inverse().unwrap();
            let mut s = DVector::<f64>::zeros(p);
            for (ia, &i) in m.iter().enumerate() {
                for (ib, &j) in m.iter().enumerate() {
                    let ei = ds.x().row(i).dot(&fit.beta.transpose());
                    let ej = ds.x().row(j).dot(&fit.beta.transpose());
                    let uj = ds.y()[j] - f.mean_eta(ej).unwrap();
                    let di = f.dmean_eta(ei).unwrap();
                    let dj = f.dmean_eta(ej).unwrap();
                    for r in 0..p {
                        s[r] += di * ds.x()[(i, r)] * winv[(ia, ib)] * uj;
                        for c in 0..p {
                            a[(r, c)] += di * ds.x()[(i, r)] * winv[(ia, ib)] * dj * ds.x()[(j, c)];
                        }
                    }
                }
            }
            b += &s * s.transpose();
        }
        let ai = a.try_inverse().unwrap();
        &ai * b * &ai
    }

    #[test]
    fn sandwich_without_neighbours_is_clustered() {
        for f in [Family::Poisson, Family::BernoulliProbit] {
            let ds = lattice_data(6, &f, 6);
            let gi = ds.group_index();
            let first = fit_pqmle(&ds, &f, &SolverOptions::default()).unwrap();
            let fit = gee_fit(
                &ds,
                &gi,
                &f,
                &first,
                &exch(0.3),
                WeightMode::GenericCorrelation,
                &SolverOptions::default(),
            )
            .unwrap();
            let av = sandwich_avar(&ds, &gi, &fit, &KernelSpec::bartlett(0.9).unwrap()).unwrap();
            let oracle = clustered_oracle(&ds, &gi, &fit);
            assert!((&av - &oracle).amax() < 1e-10 * oracle.amax());
        }
    }

    #[test]
    fn sandwich_two_groups_full_kernel() {
        let f = Family::Poisson;
        let ds = Dataset::new(
            DVector::from_vec(vec![1.0, 3.0, 0.0, 2.0]),
            DMatrix::from_row_slice(4, 2, &[1.0, -0.5, 1.0, 0.8, 1.0, -1.0, 1.0, 0.3]),
            vec![[0.0, 0.0], [0.0, 1.0], [2.0, 0.0], [2.0, 1.0]],
            vec![0, 0, 1, 1],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        let gi = ds.group_index();
        let first = fit_pqmle(&ds, &f, &SolverOptions::default()).unwrap();
        let fit = gee_fit(
            &ds,
            &gi,
            &f,
            &first,
            &exch(0.2),
            WeightMode::GenericCorrelation,
            &SolverOptions::default(),
        )
        .unwrap();
        let av = sandwich_avar(&ds, &gi, &fit, &KernelSpec::truncation(100.0).unwrap()).unwrap();
        // with k = 1 everywhere B = (s1 + s2)(s1 + s2)'; s1 + s2 = G * S_G = 0
        assert!(av.amax() < 1e-12, "{av}");
        // Bartlett with d = 2, h = 4: B = s1 s1' + s2 s2' + 0.5 (s1 s2' + s2 s1')
        let av = sandwich_avar(&ds, &gi, &fit, &KernelSpec::bartlett(4.0).unwrap()).unwrap();
        let clustered = clustered_oracle(&ds, &gi, &fit);
        // s2 = -s1 so B = 2 s1 s1' - s1 s1' = half the clustered meat
        assert!((&av - &clustered * 0.5).amax() < 1e-10 * clustered.amax());
    }

    #[test]
    fn sandwich_symmetric_psd_and_relabel_invariant() {
        let f = Family::Poisson;
        let ds = lattice_data(6, &f, 7);
        let gi = ds.group_index();
        let opts = SolverOptions::default();
        let first = fit_pqmle(&ds, &f, &opts).unwrap();
        let sp = exch(0.25);
        let mut fit = gee_fit(&ds, &gi, &f, &first, &sp, WeightMode::GenericCorrelation, &opts).unwrap();
        let k = KernelSpec::bartlett(default_bandwidth(&ds.group_distance_matrix(&gi))).unwrap();
        fit.attach_sandwich(&ds, &gi, &k).unwrap();
        let av = fit.avar.clone().unwrap();
        assert_eq!(av, av.transpose());
        assert!(av.diagonal().iter().all(|&v| v >= 0.0));
        let se = fit.se.clone().unwrap();
        for j in 0..3 {
            assert_eq!(se[j], av[(j, j)].sqrt());
        }

        // reverse the group labels
        let g_count = gi.len();
        let relabeled = ds
            .regrouped(ds.group_ids().iter().map(|&g| g_count - 1 - g).collect())
            .unwrap();
        let gi2 = relabeled.group_index();
        let mut fit2 = gee_fit(&relabeled, &gi2, &f, &first, &sp, WeightMode::GenericCorrelation, &opts).unwrap();
        fit2.attach_sandwich(&relabeled, &gi2, &k).unwrap();
        assert!((&fit.beta - &fit2.beta).amax() < 1e-10);
        assert!((av - fit2.avar.unwrap()).amax() < 1e-10);

        // truncation below the minimum group distance gives a PSD meat
        let mut fit3 = fit.clone();
        fit3.attach_sandwich(&ds, &gi, &KernelSpec::truncation(0.5).unwrap())
            .unwrap();
        let eig = fit3.avar.unwrap().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-14));
    }

    #[test]
    fn bandwidth_rule_on_lattice() {
        let ds = lattice_data(6, &Family::Poisson, 8);
        let gd = ds.group_distance_matrix(&ds.group_index());
        assert_eq!(default_bandwidth(&gd), 1.5);
    }

    #[test]
    fn partial_effect_simple_cases() {
        let ds = Dataset::new(
            DVector::from_vec(vec![1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            vec![[0.0, 0.0]],
            vec![0],
            DistanceMetric::Euclidean,
        )
        .unwrap();
        let avar = DMatrix::identity(2, 2);
        let pe = partial_effects(
            &Family::BernoulliProbit,
            &DVector::from_vec(vec![0.0, 1.0]),
            &avar,
            &ds,
            1,
            EffectKind::Continuous,
        )
        .unwrap();
        assert!((pe.estimate - 0.398_942_280_401_432_7).abs() < 1e-15);
        let pe = partial_effects(
            &Family::Poisson,
            &DVector::from_vec(vec![0.3, 0.0]),
            &avar,
            &ds,
            1,
            EffectKind::Continuous,
        )
        .unwrap();
        assert_eq!(pe.estimate, 0.0);
        let pe = partial_effects(
            &Family::Poisson,
            &DVector::from_vec(vec![0.3, 0.0]),
            &avar,
            &ds,
            1,
            EffectKind::Discrete { from: 0.0 },
        )
        .unwrap();
        assert_eq!(pe.estimate, 0.0);
    }

    #[test]
    fn delta_method_matches_parametric_bootstrap() {
        let f = Family::Poisson;
        let ds = lattice_data(6, &f, 9);
        let gi = ds.group_index();
        let opts = SolverOptions::default();
        let first = fit_pqmle(&ds, &f, &opts).unwrap();
        let mut fit = gee_fit(&ds, &gi, &f, &first, &exch(0.2), WeightMode::GenericCorrelation, &opts).unwrap();
        fit.attach_sandwich(&ds, &gi, &KernelSpec::bartlett(1.5).unwrap())
            .unwrap();
        let avar = fit.avar.clone().unwrap();
        let chol = avar.clone().cholesky().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for kind in [EffectKind::Continuous, EffectKind::Discrete { from: 0.0 }] {
            let pe = partial_effects(&f, &fit.beta, &avar, &ds, 1, kind).unwrap();
            let draws: Vec<f64> = (0..500)
                .map(|_| {
                    let z = DVector::from_iterator(3, (0..3).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)));
                    let b = &fit.beta + chol.l() * z;
                    partial_effects(&f, &b, &avar, &ds, 1, kind).unwrap().estimate
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / 500.0;
            let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 499.0).sqrt();
            assert!(
                ((pe.se - sd) / sd).abs() < 0.15,
                "{kind:?}: delta {} boot {}",
                pe.se,
                sd
            );
        }
    }
}
