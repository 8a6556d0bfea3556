//! Observations, coordinates and group structure.
//!
//! A [`Dataset`] carries the response, the design matrix, one planar or
//! geographic coordinate pair per row and a contiguous 0-based group label.
//! Groups may be ragged. [`GroupIndex`] lists the member rows of each group
//! in dataset row order.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used for great-circle distances.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    #[default]
    Euclidean,
    /// Coordinates are (latitude, longitude) in degrees.
    HaversineKm,
}

impl DistanceMetric {
    pub fn distance(self, a: [f64; 2], b: [f64; 2]) -> f64 {
        match self {
            DistanceMetric::Euclidean => (a[0] - b[0]).hypot(a[1] - b[1]),
            DistanceMetric::HaversineKm => {
                let (lat1, lat2) = (a[0].to_radians(), b[0].to_radians());
                let dlat = lat2 - lat1;
                let dlon = (b[1] - a[1]).to_radians();
                let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
                2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    coords: Vec<[f64; 2]>,
    group_id: Vec<usize>,
    metric: DistanceMetric,
    response_name: String,
    covariate_names: Vec<String>,
    coord_names: [String; 2],
    group_name: String,
}

impl Dataset {
    /// Builds a dataset with generic column names (`y`, `x1..xp`).
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        coords: Vec<[f64; 2]>,
        group_id: Vec<usize>,
        metric: DistanceMetric,
    ) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_names(y, x, coords, group_id, metric, "y".into(), names)
    }

    pub fn with_names(
        y: DVector<f64>,
        x: DMatrix<f64>,
        coords: Vec<[f64; 2]>,
        group_id: Vec<usize>,
        metric: DistanceMetric,
        response_name: String,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::validation(&response_name, "dataset has no rows"));
        }
        if x.ncols() == 0 {
            return Err(Error::validation("<design>", "design matrix has no columns"));
        }
        if x.nrows() != n || coords.len() != n || group_id.len() != n {
            return Err(Error::InvalidArgument(format!(
                "row counts disagree: y={n}, X={}, coords={}, groups={}",
                x.nrows(),
                coords.len(),
                group_id.len()
            )));
        }
        if covariate_names.len() != x.ncols() {
            return Err(Error::InvalidArgument(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                x.ncols()
            )));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                &response_name,
                format!("non-finite value at row {i}"),
            ));
        }
        for (j, name) in covariate_names.iter().enumerate() {
            if let Some(i) = x.column(j).iter().position(|v| !v.is_finite()) {
                return Err(Error::validation(name, format!("non-finite value at row {i}")));
            }
        }
        if let Some(i) = coords.iter().position(|c| !c[0].is_finite() || !c[1].is_finite()) {
            return Err(Error::validation(
                "<coords>",
                format!("non-finite coordinate at row {i}"),
            ));
        }
        if metric == DistanceMetric::HaversineKm {
            if let Some(i) = coords.iter().position(|c| c[0].abs() > 90.0 || c[1].abs() > 180.0) {
                return Err(Error::validation(
                    "<coords>",
                    format!("latitude/longitude out of range at row {i}"),
                ));
            }
        }
        let n_groups = group_id.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; n_groups];
        for &g in &group_id {
            seen[g] = true;
        }
        if let Some(g) = seen.iter().position(|s| !s) {
            return Err(Error::validation("<group>", format!("group label {g} has no members")));
        }
        Ok(Dataset {
            y,
            x,
            coords,
            group_id,
            metric,
            response_name,
            covariate_names,
            coord_names: ["coord_a".into(), "coord_b".into()],
            group_name: "group_id".into(),
        })
    }

    /// Sets the column names used for coordinates and groups when saving.
    pub fn with_column_labels(mut self, coords: [&str; 2], group: &str) -> Self {
        self.coord_names = [coords[0].into(), coords[1].into()];
        self.group_name = group.into();
        self
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }
    pub fn group_ids(&self) -> &[usize] {
        &self.group_id
    }
    pub fn metric(&self) -> DistanceMetric {
        self.metric
    }
    pub fn response_name(&self) -> &str {
        &self.response_name
    }
    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }
    pub fn n_groups(&self) -> usize {
        self.group_id.iter().max().map_or(0, |m| m + 1)
    }

    /// Index of a column whose entries are all exactly 1.
    pub fn intercept_column(&self) -> Option<usize> {
        (0..self.p()).find(|&j| self.x.column(j).iter().all(|&v| v == 1.0))
    }

    /// Linear index x_i'beta for every row.
    pub fn linear_index(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.x * beta
    }

    pub fn group_index(&self) -> GroupIndex {
        GroupIndex::from_ids(&self.group_id)
    }

    /// Returns a copy with a new grouping.
    pub fn regrouped(&self, group_id: Vec<usize>) -> Result<Dataset> {
        let mut ds = Dataset::with_names(
            self.y.clone(),
            self.x.clone(),
            self.coords.clone(),
            group_id,
            self.metric,
            self.response_name.clone(),
            self.covariate_names.clone(),
        )?;
        ds.coord_names = self.coord_names.clone();
        ds.group_name = self.group_name.clone();
        Ok(ds)
    }

    /// Rows restricted to `rows` (in the given order); group labels are
    /// renumbered by first appearance.
    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i]));
        let x = self.x.select_rows(rows);
        let coords = rows.iter().map(|&i| self.coords[i]).collect();
        let mut relabel = HashMap::new();
        let group_id = rows
            .iter()
            .map(|&i| {
                let next = relabel.len();
                *relabel.entry(self.group_id[i]).or_insert(next)
            })
            .collect();
        let mut ds = Dataset::with_names(
            y,
            x,
            coords,
            group_id,
            self.metric,
            self.response_name.clone(),
            self.covariate_names.clone(),
        )?;
        ds.coord_names = self.coord_names.clone();
        ds.group_name = self.group_name.clone();
        Ok(ds)
    }

    /// Every response must be a non-negative integer.
    pub fn validate_counts(&self) -> Result<()> {
        if let Some(i) = self.y.iter().position(|&v| v < 0.0 || v.fract() != 0.0) {
            return Err(Error::validation(
                &self.response_name,
                format!("row {i}: {} is not a non-negative integer count", self.y[i]),
            ));
        }
        Ok(())
    }

    /// Every response must be 0 or 1.
    pub fn validate_binary(&self) -> Result<()> {
        if let Some(i) = self.y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::validation(
                &self.response_name,
                format!("row {i}: {} is not a 0/1 response", self.y[i]),
            ));
        }
        Ok(())
    }

    pub fn pairwise_distance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        self.metric.distance(self.coords[i], self.coords[j])
    }

    /// Smallest distance between a member of `g` and a member of `h`.
    pub fn group_distance(&self, gi: &GroupIndex, g: usize, h: usize) -> Result<f64> {
        if g == h {
            return Err(Error::InvalidArgument(format!(
                "group distance needs two distinct groups (got {g} twice)"
            )));
        }
        if g >= gi.len() || h >= gi.len() {
            return Err(Error::InvalidArgument(format!(
                "group index out of range ({g}, {h}) for {} groups",
                gi.len()
            )));
        }
        let mut best = f64::INFINITY;
        for &i in gi.members(g) {
            for &j in gi.members(h) {
                best = best.min(self.pairwise_distance(i, j));
            }
        }
        Ok(best)
    }

    /// G x G matrix of minimum cross-group distances (zero diagonal).
    pub fn group_distance_matrix(&self, gi: &GroupIndex) -> DMatrix<f64> {
        let g_count = gi.len();
        let mut out = DMatrix::zeros(g_count, g_count);
        for g in 0..g_count {
            for h in (g + 1)..g_count {
                let d = self.group_distance(gi, g, h).expect("distinct groups");
                out[(g, h)] = d;
                out[(h, g)] = d;
            }
        }
        out
    }

    /// Writes the dataset as CSV and returns the schema that reads it back.
    ///
    /// Floats are written in shortest round-trip form, so reloading with the
    /// returned schema reproduces the dataset bit for bit.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<Schema> {
        let path = path.as_ref();
        let io_err = |cause| Error::Io {
            path: path.display().to_string(),
            cause,
        };
        let mut out = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
        let mut header = vec![self.response_name.clone()];
        header.extend(self.covariate_names.iter().cloned());
        header.extend(self.coord_names.iter().cloned());
        header.push(self.group_name.clone());
        writeln!(out, "{}", header.join(",")).map_err(io_err)?;
        for i in 0..self.n() {
            let mut fields = vec![format!("{}", self.y[i])];
            fields.extend((0..self.p()).map(|j| format!("{}", self.x[(i, j)])));
            fields.push(format!("{}", self.coords[i][0]));
            fields.push(format!("{}", self.coords[i][1]));
            fields.push(self.group_id[i].to_string());
            writeln!(out, "{}", fields.join(",")).map_err(io_err)?;
        }
        out.flush().map_err(io_err)?;
        Ok(Schema {
            response: self.response_name.clone(),
            covariates: self.covariate_names.clone(),
            intercept: false,
            coords: self.coord_names.clone(),
            metric: self.metric,
            group: Some(self.group_name.clone()),
        })
    }
}

/// Member rows of each group, in dataset row order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupIndex {
    groups: Vec<Vec<usize>>,
}

impl GroupIndex {
    pub fn from_ids(ids: &[usize]) -> Self {
        let g_count = ids.iter().max().map_or(0, |m| m + 1);
        let mut groups = vec![Vec::new(); g_count];
        for (i, &g) in ids.iter().enumerate() {
            groups[g].push(i);
        }
        GroupIndex { groups }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }
    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
    pub fn members(&self, g: usize) -> &[usize] {
        &self.groups[g]
    }
    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }
    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
    pub fn max_size(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Group labels for a `side x side` lattice stored row-major, tiled into
/// square blocks of `block` cells (block = 4 gives 2x2 tiles).
pub fn block_grouping(side: usize, block: usize) -> Result<Vec<usize>> {
    let tile = (block as f64).sqrt().round() as usize;
    if tile == 0 || tile * tile != block {
        return Err(Error::InvalidArgument(format!(
            "block size {block} is not a square tile"
        )));
    }
    if side == 0 || !side.is_multiple_of(tile) {
        return Err(Error::InvalidArgument(format!(
            "lattice side {side} is not divisible by the {tile}x{tile} tile"
        )));
    }
    let tiles_per_row = side / tile;
    Ok((0..side * side)
        .map(|i| {
            let (r, s) = (i / side, i % side);
            (r / tile) * tiles_per_row + s / tile
        })
        .collect())
}

/// Column-role mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub response: String,
    pub covariates: Vec<String>,
    /// Append a `const` column of ones after the covariates.
    #[serde(default)]
    pub intercept: bool,
    /// Two coordinate columns; (lat, lon) for `haversine-km`.
    pub coords: [String; 2],
    #[serde(default)]
    pub metric: DistanceMetric,
    /// Optional grouping column. Without it every row is its own group.
    #[serde(default)]
    pub group: Option<String>,
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: Dataset,
    /// Rows dropped because the response was missing.
    pub dropped_missing_response: usize,
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | ".")
}

/// Reads a CSV file (header row, `,` delimiter, `.` decimal point).
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<LoadedData> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|cause| Error::Io {
        path: path.display().to_string(),
        cause,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers().map_err(|e| csv_error(&e))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::Parse {
            line: 1,
            message: "empty file: header row required".into(),
        });
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::validation(name, "column not found in header"))
    };
    let y_col = find(&schema.response)?;
    let x_cols = schema.covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    let c_cols = [find(&schema.coords[0])?, find(&schema.coords[1])?];
    let g_col = schema.group.as_deref().map(find).transpose()?;

    let parse_num = |field: &str, column: &str, line: u64| -> Result<f64> {
        field.trim().parse::<f64>().map_err(|_| Error::Parse {
            line,
            message: format!("column `{column}`: cannot parse `{field}` as a number"),
        })
    };

    let mut y = Vec::new();
    let mut x_vals = Vec::new();
    let mut coords = Vec::new();
    let mut group_raw = Vec::new();
    let mut dropped = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(&e))?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| record.get(c).unwrap_or("");
        if is_missing(field(y_col)) {
            dropped += 1;
            continue;
        }
        y.push(parse_num(field(y_col), &schema.response, line)?);
        for (name, &c) in schema.covariates.iter().zip(&x_cols) {
            if is_missing(field(c)) {
                return Err(Error::validation(name, format!("missing value at line {line}")));
            }
            x_vals.push(parse_num(field(c), name, line)?);
        }
        let mut pt = [0.0; 2];
        for k in 0..2 {
            if is_missing(field(c_cols[k])) {
                return Err(Error::validation(
                    &schema.coords[k],
                    format!("missing value at line {line}"),
                ));
            }
            pt[k] = parse_num(field(c_cols[k]), &schema.coords[k], line)?;
        }
        coords.push(pt);
        if let Some(c) = g_col {
            let label = field(c).trim().to_string();
            if label.is_empty() {
                return Err(Error::validation(
                    schema.group.as_deref().unwrap_or_default(),
                    format!("missing group label at line {line}"),
                ));
            }
            group_raw.push(label);
        }
    }
    if dropped > 0 {
        log::info!("dropped {dropped} rows with missing `{}`", schema.response);
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::validation(&schema.response, "no rows with a response value"));
    }
    let k = schema.covariates.len();
    let p = k + usize::from(schema.intercept);
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        for j in 0..k {
            x[(i, j)] = x_vals[i * k + j];
        }
        if schema.intercept {
            x[(i, k)] = 1.0;
        }
    }
    let mut names = schema.covariates.clone();
    if schema.intercept {
        names.push("const".into());
    }
    let group_id = if g_col.is_some() {
        group_labels(&group_raw)
    } else {
        (0..n).collect()
    };
    let mut dataset = Dataset::with_names(
        DVector::from_vec(y),
        x,
        coords,
        group_id,
        schema.metric,
        schema.response.clone(),
        names,
    )?;
    dataset.coord_names = schema.coords.clone();
    if let Some(g) = &schema.group {
        dataset.group_name = g.clone();
    }
    Ok(LoadedData {
        dataset,
        dropped_missing_response: dropped,
    })
}

/// Integer labels already forming {0..G-1} are kept; anything else is
/// numbered by first appearance.
fn group_labels(raw: &[String]) -> Vec<usize> {
    let as_ints: Option<Vec<usize>> = raw.iter().map(|s| s.parse::<usize>().ok()).collect();
    if let Some(ids) = as_ints {
        let g_count = ids.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; g_count];
        ids.iter().for_each(|&g| seen[g] = true);
        if seen.iter().all(|&s| s) {
            return ids;
        }
    }
    let mut map: HashMap<&str, usize> = HashMap::new();
    raw.iter()
        .map(|s| {
            let next = map.len();
            *map.entry(s.as_str()).or_insert(next)
        })
        .collect()
}

fn csv_error(e: &csv::Error) -> Error {
    Error::Parse {
        line: e.position().map_or(0, |p| p.line()),
        message: e.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(coords: Vec<[f64; 2]>, groups: Vec<usize>) -> Dataset {
        let n = coords.len();
        Dataset::new(
            DVector::zeros(n),
            DMatrix::from_element(n, 1, 1.0),
            coords,
            groups,
            DistanceMetric::Euclidean,
        )
        .unwrap()
    }

    #[test]
    fn euclidean_345() {
        let ds = tiny(vec![[0.0, 0.0], [3.0, 4.0]], vec![0, 0]);
        assert_eq!(ds.pairwise_distance(0, 1), 5.0);
        assert_eq!(ds.pairwise_distance(1, 1), 0.0);
    }

    #[test]
    fn haversine_one_degree_of_longitude_on_equator() {
        let d = DistanceMetric::HaversineKm.distance([0.0, 0.0], [0.0, 1.0]);
        // arc length R * theta for a central angle of one degree
        let oracle = EARTH_RADIUS_KM * std::f64::consts::PI / 180.0;
        assert!((d - oracle).abs() < 1e-9, "{d} vs {oracle}");
        assert!((d - 111.19).abs() < 0.01);
    }

    #[test]
    fn haversine_rejects_bad_latitude() {
        let err = Dataset::new(
            DVector::zeros(1),
            DMatrix::from_element(1, 1, 1.0),
            vec![[91.0, 0.0]],
            vec![0],
            DistanceMetric::HaversineKm,
        );
        assert!(err.is_err());
    }

    #[test]
    fn block_grouping_sizes() {
        let g = block_grouping(20, 4).unwrap();
        let gi = GroupIndex::from_ids(&g);
        assert_eq!(gi.len(), 100);
        assert!(gi.sizes().iter().all(|&s| s == 4));
        let g40 = block_grouping(40, 4).unwrap();
        assert_eq!(GroupIndex::from_ids(&g40).len(), 400);
        assert_eq!(block_grouping(2, 4).unwrap(), vec![0, 0, 0, 0]);
        assert!(block_grouping(5, 4).is_err());
        assert!(block_grouping(4, 3).is_err());
    }

    fn lattice(side: usize) -> Dataset {
        let coords = (0..side * side)
            .map(|i| [(i / side + 1) as f64, (i % side + 1) as f64])
            .collect();
        tiny(coords, block_grouping(side, 4).unwrap())
    }

    #[test]
    fn group_distances_on_lattice() {
        let ds = lattice(6);
        let gi = ds.group_index();
        // tiles are numbered row-major over a 3x3 tile grid
        assert_eq!(ds.group_distance(&gi, 0, 1).unwrap(), 1.0);
        // one tile gap between columns 0 and 2: brute-force all 16 cross pairs
        let brute = gi
            .members(0)
            .iter()
            .flat_map(|&i| gi.members(2).iter().map(move |&j| (i, j)))
            .map(|(i, j)| ds.pairwise_distance(i, j))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(brute, 3.0);
        assert_eq!(ds.group_distance(&gi, 0, 2).unwrap(), brute);
        assert!((ds.group_distance(&gi, 0, 4).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert!(ds.group_distance(&gi, 3, 3).is_err());
    }

    #[test]
    fn group_labels_must_be_contiguous() {
        let r = Dataset::new(
            DVector::zeros(2),
            DMatrix::from_element(2, 1, 1.0),
            vec![[0.0, 0.0]; 2],
            vec![0, 2],
            DistanceMetric::Euclidean,
        );
        assert!(r.is_err());
    }

    #[test]
    fn count_and_binary_validation() {
        let mut ds = tiny(vec![[0.0, 0.0]; 3], vec![0, 0, 0]);
        ds.y = DVector::from_vec(vec![0.0, 2.5, 1.0]);
        assert!(matches!(ds.validate_counts(), Err(Error::Validation { .. })));
        ds.y = DVector::from_vec(vec![0.0, 1.0, 1.0]);
        assert!(ds.validate_counts().is_ok());
        assert!(ds.validate_binary().is_ok());
        ds.y[0] = 2.0;
        assert!(ds.validate_binary().is_err());
    }
}
