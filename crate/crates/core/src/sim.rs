//! Simulation designs: lattices, SAR and multivariate normal error fields,
//! the count and probit data generating processes, and an FDI-like ragged
//! cross-section.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Dyn, LU};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::{block_grouping, Dataset, DistanceMetric};
use crate::error::{Error, Result};
use crate::special::norm_quantile;

/// Condition estimate above which I - rho W is treated as singular.
pub const SAR_MAX_CONDITION: f64 = 1e12;
/// Eigenvalue floor used by the nearest-PD repair.
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Largest entry change the PD repair may make.
pub const MAX_REPAIR_CHANGE: f64 = 0.05;
/// rho substituted for the singular rho = 1 block design.
pub const RHO_ONE_FALLBACK: f64 = 1.0 - 1e-6;
pub const PROBIT_THRESHOLD: f64 = 1.5;
/// Standard deviation of x2 in the count designs.
pub const COUNT_X2_SD: f64 = 0.25;

/// Per-replication generator: stream `rep` of the ChaCha8 generator keyed by
/// `seed`.
pub fn rep_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

/// Uniform on the open interval (0, 1).
pub fn uniform_open(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal by inversion, so draws depend only on the bit stream.
pub fn std_normal(rng: &mut impl RngCore) -> f64 {
    norm_quantile(uniform_open(rng))
}

pub fn std_normal_vec(rng: &mut impl RngCore, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| std_normal(rng)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub side: usize,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
}

fn default_spacing() -> f64 {
    1.0
}

impl LatticeSpec {
    pub fn new(side: usize) -> Self {
        LatticeSpec { side, spacing: 1.0 }
    }
}

/// Coordinates and 2x2 block groups of a square lattice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub side: usize,
    pub coords: Vec<[f64; 2]>,
    pub group_id: Vec<usize>,
}

impl Lattice {
    pub fn n(&self) -> usize {
        self.coords.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_id.iter().max().map_or(0, |g| g + 1)
    }

    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_groups()];
        for (i, &g) in self.group_id.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        DistanceMetric::Euclidean.distance(self.coords[i], self.coords[j])
    }
}

pub fn make_lattice(spec: &LatticeSpec) -> Result<Lattice> {
    if spec.side == 0 || !spec.side.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "lattice side must be a positive even number, got {}",
            spec.side
        )));
    }
    if !(spec.spacing > 0.0 && spec.spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad lattice spacing {}", spec.spacing)));
    }
    let side = spec.side;
    let coords = (0..side * side)
        .map(|i| {
            [
                (i / side + 1) as f64 * spec.spacing,
                (i % side + 1) as f64 * spec.spacing,
            ]
        })
        .collect();
    Ok(Lattice {
        side,
        coords,
        group_id: block_grouping(side, 4)?,
    })
}

/// Block-diagonal spatial weight matrix stored as its blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    n: usize,
    groups: Vec<Vec<usize>>,
    blocks: Vec<DMatrix<f64>>,
}

impl BlockWeights {
    pub fn new(n: usize, groups: Vec<Vec<usize>>, blocks: Vec<DMatrix<f64>>) -> Result<Self> {
        if groups.len() != blocks.len() {
            return Err(Error::InvalidArgument("one block per group required".into()));
        }
        let mut seen = vec![false; n];
        for (members, b) in groups.iter().zip(&blocks) {
            if b.nrows() != members.len() || b.ncols() != members.len() {
                return Err(Error::InvalidArgument("block size does not match its group".into()));
            }
            for &i in members {
                if i >= n || seen[i] {
                    return Err(Error::InvalidArgument("groups must partition 0..n".into()));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("groups must partition 0..n".into()));
        }
        Ok(BlockWeights { n, groups, blocks })
    }

    /// A single dense block covering every row.
    pub fn dense(w: DMatrix<f64>) -> Result<Self> {
        let n = w.nrows();
        Self::new(n, vec![(0..n).collect()], vec![w])
    }

    /// (J - I)/(L - 1) within every group.
    pub fn equal_neighbours(lattice: &Lattice) -> Self {
        let groups = lattice.groups();
        let blocks = groups
            .iter()
            .map(|m| {
                let l = m.len();
                let off = if l > 1 { 1.0 / (l - 1) as f64 } else { 0.0 };
                DMatrix::from_fn(l, l, |a, b| if a == b { 0.0 } else { off })
            })
            .collect();
        BlockWeights {
            n: lattice.n(),
            groups,
            blocks,
        }
    }

    /// rho/(6 d) within every group.
    pub fn inverse_distance_blocks(lattice: &Lattice, rho: f64) -> Self {
        let groups = lattice.groups();
        let blocks = groups
            .iter()
            .map(|m| {
                DMatrix::from_fn(m.len(), m.len(), |a, b| {
                    if a == b {
                        0.0
                    } else {
                        rho / (6.0 * lattice.distance(m[a], m[b]))
                    }
                })
            })
            .collect();
        BlockWeights {
            n: lattice.n(),
            groups,
            blocks,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.n, self.n);
        for (members, b) in self.groups.iter().zip(&self.blocks) {
            for (a, &i) in members.iter().enumerate() {
                for (c, &j) in members.iter().enumerate() {
                    w[(i, j)] = b[(a, c)];
                }
            }
        }
        w
    }
}

/// Factorized I - rho W with the per-row variances of (I - rho W)^-1 eps.
#[derive(Debug, Clone)]
pub struct SarOperator {
    rho: f64,
    n: usize,
    groups: Vec<Vec<usize>>,
    lus: Vec<LU<f64, Dyn, Dyn>>,
    sigma2: DVector<f64>,
}

impl SarOperator {
    pub fn new(w: &BlockWeights, rho: f64) -> Result<Self> {
        if !rho.is_finite() {
            return Err(Error::InvalidArgument(format!("rho must be finite, got {rho}")));
        }
        let mut lus = Vec::with_capacity(w.blocks.len());
        let mut sigma2 = DVector::zeros(w.n);
        for (members, b) in w.groups.iter().zip(&w.blocks) {
            let l = members.len();
            let m = DMatrix::identity(l, l) - b * rho;
            let sv = m.clone().singular_values();
            let (smax, smin) = (sv.max(), sv.min());
            let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
            if !(condition <= SAR_MAX_CONDITION) {
                return Err(Error::SarSingular { rho, condition });
            }
            let lu = m.lu();
            let inv = lu
                .solve(&DMatrix::identity(l, l))
                .ok_or(Error::SarSingular { rho, condition })?;
            for (a, &i) in members.iter().enumerate() {
                sigma2[i] = inv.row(a).norm_squared();
            }
            lus.push(lu);
        }
        Ok(SarOperator {
            rho,
            n: w.n,
            groups: w.groups.clone(),
            lus,
            sigma2,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Var of each entry of (I - rho W)^-1 eps for eps ~ N(0, I).
    pub fn variances(&self) -> &DVector<f64> {
        &self.sigma2
    }

    pub fn apply(&self, eps: &DVector<f64>) -> Result<DVector<f64>> {
        if eps.len() != self.n {
            return Err(Error::InvalidArgument(format!(
                "innovation length {} does not match n = {}",
                eps.len(),
                self.n
            )));
        }
        let mut out = DVector::zeros(self.n);
        for (members, lu) in self.groups.iter().zip(&self.lus) {
            let rhs = DVector::from_iterator(members.len(), members.iter().map(|&i| eps[i]));
            let x = lu.solve(&rhs).ok_or(Error::SarSingular {
                rho: self.rho,
                condition: f64::INFINITY,
            })?;
            for (a, &i) in members.iter().enumerate() {
                out[i] = x[a];
            }
        }
        Ok(out)
    }
}

/// e = (I - rho W)^-1 eps for a dense W.
pub fn sar_error(w: &DMatrix<f64>, rho: f64, eps: &DVector<f64>) -> Result<DVector<f64>> {
    SarOperator::new(&BlockWeights::dense(w.clone())?, rho)?.apply(eps)
}

/// Correlated standard normal draws via a (possibly repaired) Cholesky
/// factor.
#[derive(Debug, Clone)]
pub struct MvnSampler {
    l: DMatrix<f64>,
    repair_change: Option<f64>,
}

impl MvnSampler {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let n = sigma.nrows();
        if sigma.ncols() != n {
            return Err(Error::InvalidArgument("correlation matrix must be square".into()));
        }
        for i in 0..n {
            if (sigma[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("diagonal entry {i} is not 1")));
            }
            for j in 0..i {
                if sigma[(i, j)] != sigma[(j, i)] {
                    return Err(Error::InvalidArgument("correlation matrix is not symmetric".into()));
                }
            }
        }
        if let Some(ch) = sigma.clone().cholesky() {
            return Ok(MvnSampler {
                l: ch.l(),
                repair_change: None,
            });
        }
        let eig = sigma.clone().symmetric_eigen();
        let floored = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
        let mut repaired = &eig.eigenvectors * DMatrix::from_diagonal(&floored) * eig.eigenvectors.transpose();
        let d = repaired.diagonal().map(|v| 1.0 / v.sqrt());
        for i in 0..n {
            for j in 0..n {
                repaired[(i, j)] *= d[i] * d[j];
            }
        }
        repaired = (&repaired + repaired.transpose()) * 0.5;
        let change = (&repaired - sigma).amax();
        if change > MAX_REPAIR_CHANGE {
            return Err(Error::FarFromPd { change });
        }
        log::warn!("correlation matrix repaired to nearest PD (max entry change {change:.3e})");
        let ch = repaired
            .cholesky()
            .ok_or_else(|| Error::Singular("repaired correlation matrix".into()))?;
        Ok(MvnSampler {
            l: ch.l(),
            repair_change: Some(change),
        })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Largest entry change made by the PD repair, if one was needed.
    pub fn repair_change(&self) -> Option<f64> {
        self.repair_change
    }

    pub fn sample(&self, rng: &mut impl RngCore) -> DVector<f64> {
        &self.l * std_normal_vec(rng, self.dim())
    }
}

/// Matrix with unit diagonal and rho/d_ij off the diagonal.
pub fn inverse_distance_correlation(coords: &[[f64; 2]], metric: DistanceMetric, rho: f64) -> DMatrix<f64> {
    let n = coords.len();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            rho / metric.distance(coords[i], coords[j])
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgpCase {
    Count1,
    Count2,
    Count3,
    Probit1,
    Probit2,
}

impl DgpCase {
    pub const ALL: [DgpCase; 5] = [
        DgpCase::Count1,
        DgpCase::Count2,
        DgpCase::Count3,
        DgpCase::Probit1,
        DgpCase::Probit2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DgpCase::Count1 => "count1",
            DgpCase::Count2 => "count2",
            DgpCase::Count3 => "count3",
            DgpCase::Probit1 => "probit1",
            DgpCase::Probit2 => "probit2",
        }
    }

    pub fn is_count(self) -> bool {
        matches!(self, DgpCase::Count1 | DgpCase::Count2 | DgpCase::Count3)
    }

    pub fn beta0(self) -> [f64; 4] {
        match self {
            DgpCase::Count1 | DgpCase::Count2 => [0.5, 1.0, 1.0, 1.0],
            DgpCase::Count3 => [-1.0, 1.0, 1.0, 1.0],
            DgpCase::Probit1 | DgpCase::Probit2 => [1.0, 1.0, 1.0, 1.0],
        }
    }

    /// The rho values tabulated for this design.
    pub fn rho_grid(self) -> [f64; 4] {
        match self {
            DgpCase::Count3 | DgpCase::Probit2 => [0.0, 0.2, 0.4, 0.6],
            _ => [0.0, 0.5, 1.0, 1.5],
        }
    }

    /// Whether the design uses the block SAR with (J - I)/3 blocks.
    fn is_block_sar(self) -> bool {
        matches!(self, DgpCase::Count1 | DgpCase::Probit1)
    }
}

impl fmt::Display for DgpCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DgpCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DgpCase::ALL.iter().copied().find(|c| c.as_str() == s).ok_or_else(|| {
            let valid: Vec<_> = DgpCase::ALL.iter().map(|c| c.as_str()).collect();
            Error::InvalidArgument(format!("unknown case `{s}`; valid cases: {}", valid.join(", ")))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub case: DgpCase,
    pub rho: f64,
    pub side: usize,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Count case 2: apply rho again on top of the rho/(6d) blocks.
    #[serde(default)]
    pub case2_double_rho: bool,
}

fn default_threshold() -> f64 {
    PROBIT_THRESHOLD
}

impl DgpSpec {
    pub fn new(case: DgpCase, rho: f64, side: usize) -> Self {
        DgpSpec {
            case,
            rho,
            side,
            threshold: PROBIT_THRESHOLD,
            case2_double_rho: false,
        }
    }

    pub fn beta0(&self) -> [f64; 4] {
        self.case.beta0()
    }
}

#[derive(Debug, Clone)]
enum Field {
    Sar(SarOperator),
    Mvn(MvnSampler),
    None,
}

/// A design with its rho-dependent operators factorized once.
#[derive(Debug, Clone)]
pub struct PreparedDgp {
    spec: DgpSpec,
    lattice: Lattice,
    field: Field,
    rho_used: f64,
    warnings: Vec<String>,
}

impl PreparedDgp {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        if !spec.rho.is_finite() {
            return Err(Error::InvalidArgument(format!("rho must be finite, got {}", spec.rho)));
        }
        let lattice = make_lattice(&LatticeSpec::new(spec.side))?;
        let mut warnings = Vec::new();
        if !spec.case.rho_grid().contains(&spec.rho) {
            let msg = format!(
                "rho = {} is outside the tabulated grid {:?} for {}",
                spec.rho,
                spec.case.rho_grid(),
                spec.case
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let mut rho_used = spec.rho;
        let field = match spec.case {
            DgpCase::Count1 | DgpCase::Probit1 => {
                let w = BlockWeights::equal_neighbours(&lattice);
                match SarOperator::new(&w, spec.rho) {
                    Ok(op) => Field::Sar(op),
                    Err(Error::SarSingular { .. }) if spec.case.is_block_sar() && spec.rho == 1.0 => {
                        let msg = format!(
                            "I - rho W is singular at rho = 1 for {}; substituting rho = {RHO_ONE_FALLBACK}",
                            spec.case
                        );
                        log::warn!("{msg}");
                        warnings.push(msg);
                        rho_used = RHO_ONE_FALLBACK;
                        Field::Sar(SarOperator::new(&w, rho_used)?)
                    }
                    Err(e) => return Err(e),
                }
            }
            DgpCase::Count2 => {
                let w = BlockWeights::inverse_distance_blocks(&lattice, spec.rho);
                let outer = if spec.case2_double_rho { spec.rho } else { 1.0 };
                Field::Sar(SarOperator::new(&w, outer)?)
            }
            DgpCase::Count3 | DgpCase::Probit2 => {
                if spec.rho == 0.0 {
                    Field::None
                } else {
                    let sigma = inverse_distance_correlation(&lattice.coords, DistanceMetric::Euclidean, spec.rho);
                    let sampler = MvnSampler::new(&sigma)?;
                    if let Some(c) = sampler.repair_change() {
                        warnings.push(format!("correlation matrix repaired (max entry change {c:.3e})"));
                    }
                    Field::Mvn(sampler)
                }
            }
        };
        Ok(PreparedDgp {
            spec,
            lattice,
            field,
            rho_used,
            warnings,
        })
    }

    pub fn spec(&self) -> &DgpSpec {
        &self.spec
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    /// rho actually used by the generator (differs from the request only
    /// for the rho = 1 fallback).
    pub fn rho_used(&self) -> f64 {
        self.rho_used
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn correlated_normals(&self, rng: &mut impl RngCore) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.lattice.n();
        match &self.field {
            Field::Sar(op) => Ok((op.apply(&std_normal_vec(rng, n))?, op.variances().clone())),
            Field::Mvn(s) => Ok((s.sample(rng), DVector::from_element(n, 1.0))),
            Field::None => Ok((std_normal_vec(rng, n), DVector::from_element(n, 1.0))),
        }
    }

    /// One draw of the design.
    pub fn generate(&self, rng: &mut impl RngCore) -> Result<Dataset> {
        if self.spec.case.is_count() {
            self.generate_count(rng)
        } else {
            self.generate_probit(rng)
        }
    }

    fn generate_count(&self, rng: &mut impl RngCore) -> Result<Dataset> {
        let n = self.lattice.n();
        let beta = self.spec.beta0();
        let x2 = match (&self.field, self.spec.case) {
            (Field::Mvn(s), DgpCase::Count3) => s.sample(rng),
            (_, DgpCase::Count3) => std_normal_vec(rng, n),
            _ => std_normal_vec(rng, n) * COUNT_X2_SD,
        };
        let x3 = DVector::from_iterator(n, (0..n).map(|_| uniform_open(rng)));
        let x4 = std_normal_vec(rng, n).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let (a, s2) = self.correlated_normals(rng)?;
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let v = (a[i] - 0.5 * s2[i]).exp();
            let m = v * (beta[0] + beta[1] * x2[i] + beta[2] * x3[i] + beta[3] * x4[i]).exp();
            y[i] = poisson_draw(m, rng)?;
        }
        self.assemble(y, &x2, &x3, &x4)
    }

    fn generate_probit(&self, rng: &mut impl RngCore) -> Result<Dataset> {
        let n = self.lattice.n();
        let beta = self.spec.beta0();
        let x2 = std_normal_vec(rng, n).add_scalar(1.0);
        let e1 = std_normal_vec(rng, n);
        let x3 = &x2 * 0.2 - e1 * 1.2;
        let e2 = std_normal_vec(rng, n);
        let x5 = &x2 * 0.2 + &x3 * 0.2 + e2;
        let x4 = x5.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let (e4, _) = self.correlated_normals(rng)?;
        let y = DVector::from_fn(n, |i, _| {
            let ystar = beta[0] + beta[1] * x2[i] + beta[2] * x3[i] + beta[3] * x4[i] + e4[i];
            if ystar >= self.spec.threshold {
                1.0
            } else {
                0.0
            }
        });
        self.assemble(y, &x2, &x3, &x4)
    }

    fn assemble(&self, y: DVector<f64>, x2: &DVector<f64>, x3: &DVector<f64>, x4: &DVector<f64>) -> Result<Dataset> {
        let n = self.lattice.n();
        let mut x = DMatrix::from_element(n, 4, 1.0);
        x.set_column(1, x2);
        x.set_column(2, x3);
        x.set_column(3, x4);
        Dataset::with_names(
            y,
            x,
            self.lattice.coords.clone(),
            self.lattice.group_id.clone(),
            DistanceMetric::Euclidean,
            "y".into(),
            vec!["const".into(), "x2".into(), "x3".into(), "x4".into()],
        )
        .map(|ds| ds.with_column_labels(["sx", "sy"], "group"))
    }
}

fn poisson_draw(m: f64, rng: &mut impl RngCore) -> Result<f64> {
    if m == 0.0 {
        return Ok(0.0);
    }
    let d = Poisson::new(m).map_err(|_| Error::MeanOutOfRange {
        family: "poisson",
        mean: m,
    })?;
    Ok(d.sample(rng))
}

/// Province layout of the FDI-like design: name, centre (lat, lon), cities.
pub const PROVINCES: [(&str, f64, f64, usize); 31] = [
    ("Beijing", 39.9, 116.4, 1),
    ("Tianjin", 39.1, 117.2, 1),
    ("Hebei", 38.0, 114.5, 11),
    ("Shanxi", 37.6, 112.3, 11),
    ("Guangxi", 23.6, 108.6, 14),
    ("Inner Mongolia", 42.3, 112.0, 9),
    ("Liaoning", 41.3, 122.6, 14),
    ("Jilin", 43.6, 126.0, 8),
    ("Heilongjiang", 46.6, 127.8, 12),
    ("Shanghai", 31.2, 121.5, 1),
    ("Jiangsu", 32.9, 119.5, 13),
    ("Zhejiang", 29.2, 120.1, 11),
    ("Anhui", 31.8, 117.2, 17),
    ("Fujian", 26.1, 118.3, 9),
    ("Jiangxi", 27.6, 115.7, 11),
    ("Shandong", 36.4, 118.3, 17),
    ("Henan", 34.0, 113.6, 17),
    ("Hubei", 30.9, 112.3, 12),
    ("Hunan", 27.6, 111.7, 13),
    ("Guangdong", 23.4, 113.4, 21),
    ("Hainan", 19.2, 109.7, 2),
    ("Chongqing", 29.6, 106.5, 1),
    ("Sichuan", 30.6, 103.9, 18),
    ("Guizhou", 26.8, 106.9, 4),
    ("Yunnan", 25.0, 101.5, 8),
    ("Shaanxi", 35.2, 108.9, 10),
    ("Gansu", 36.0, 103.8, 10),
    ("Qinghai", 36.6, 101.8, 1),
    ("Ningxia", 37.3, 106.2, 5),
    ("Xinjiang", 42.0, 86.0, 1),
    ("Tibet", 29.6, 91.1, 1),
];

const BORDER_PROVINCES: [&str; 9] = [
    "Guangxi",
    "Inner Mongolia",
    "Liaoning",
    "Jilin",
    "Heilongjiang",
    "Yunnan",
    "Gansu",
    "Xinjiang",
    "Tibet",
];

/// Coefficients of the FDI-like design in column order
/// lnGDP, lnGDPPC, lnWAGE, lnSCIEXP, BORDER, const.
pub const FDI_BETA: [f64; 6] = [0.705, 0.747, -0.726, 0.289, -0.593, -3.884];
pub const FDI_COVARIATES: [&str; 6] = ["lnGDP", "lnGDPPC", "lnWAGE", "lnSCIEXP", "BORDER", "const"];

/// Ragged 284-city, 31-province cross-section with great-circle distances,
/// a spatially correlated lnGDP and province-correlated multiplicative
/// heterogeneity in the count response.
pub fn gen_fdi_like(rng: &mut impl RngCore) -> Result<Dataset> {
    let mut coords = Vec::new();
    let mut group_id = Vec::new();
    let mut border = Vec::new();
    for (g, &(name, lat, lon, size)) in PROVINCES.iter().enumerate() {
        let spread = 0.45 * (size as f64).sqrt();
        let is_border = BORDER_PROVINCES.contains(&name);
        for c in 0..size {
            let (dlat, dlon) = if size == 1 {
                (0.0, 0.0)
            } else {
                (
                    spread * (2.0 * uniform_open(rng) - 1.0),
                    spread * (2.0 * uniform_open(rng) - 1.0),
                )
            };
            coords.push([lat + dlat, lon + dlon]);
            group_id.push(g);
            border.push(if is_border && c < 2 { 1.0 } else { 0.0 });
        }
    }
    let n = coords.len();
    let metric = DistanceMetric::HaversineKm;
    let corr = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            (-metric.distance(coords[i], coords[j]) / 250.0).exp()
        }
    });
    let field = MvnSampler::new(&corr)?;
    let g_count = PROVINCES.len();
    let province_gdp = std_normal_vec(rng, g_count);
    let province_het = std_normal_vec(rng, g_count);
    let z_gdp = field.sample(rng);
    let z_pc = std_normal_vec(rng, n);
    let z_wage = std_normal_vec(rng, n);
    let z_sci = std_normal_vec(rng, n);
    let z_het = std_normal_vec(rng, n);

    let mut x = DMatrix::zeros(n, 6);
    let mut y = DVector::zeros(n);
    let het_sd: f64 = 0.8;
    for i in 0..n {
        let g = group_id[i];
        let lngdp = 15.58 + 0.45 * province_gdp[g] + 0.8 * z_gdp[i];
        let lngdppc = 9.76 + 0.4 * (lngdp - 15.58) + 0.5 * z_pc[i];
        let lnwage = 9.93 + 0.1 * (lngdppc - 9.76) + 0.22 * z_wage[i];
        let lnsciexp = 8.86 + 0.9 * (lngdp - 15.58) + 0.7 * z_sci[i];
        let row = [lngdp, lngdppc, lnwage, lnsciexp, border[i], 1.0];
        for (c, v) in row.iter().enumerate() {
            x[(i, c)] = *v;
        }
        let a = het_sd * (0.8f64.sqrt() * province_het[g] + 0.2f64.sqrt() * z_het[i]);
        let v = (a - 0.5 * het_sd * het_sd).exp();
        let eta: f64 = row.iter().zip(FDI_BETA.iter()).map(|(a, b)| a * b).sum();
        y[i] = poisson_draw(v * eta.exp(), rng)?;
    }
    Dataset::with_names(
        y,
        x,
        coords,
        group_id,
        metric,
        "FDI".into(),
        FDI_COVARIATES.iter().map(|s| s.to_string()).collect(),
    )
    .map(|ds| ds.with_column_labels(["lat", "lon"], "province"))
}
