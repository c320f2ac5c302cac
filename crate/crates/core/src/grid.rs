//! Sampling grids, covariates and the repeatedly measured functional dataset.
//!
//! A dataset holds `N` subjects observed on an `R x L` grid: `s` is the
//! longitudinal axis (days, visits) and `t` the functional axis (minute of
//! day). Both axes live on `[0, 1]` after loading; the raw coordinates are
//! kept for reporting and export.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FmmError, Result};

/// Grid position `(r, l)`: `r` indexes `s`, `l` indexes `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub r: usize,
    pub l: usize,
}

impl Cell {
    pub fn new(r: usize, l: usize) -> Self {
        Cell { r, l }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    s_points: Vec<f64>,
    t_points: Vec<f64>,
    s_weights: Vec<f64>,
    t_weights: Vec<f64>,
    s_raw: Vec<f64>,
    t_raw: Vec<f64>,
}

const WEIGHT_SUM_TOL: f64 = 1e-12;

impl SamplingGrid {
    /// Grid on already-normalized points with default quadrature weights.
    pub fn new(s_points: Vec<f64>, t_points: Vec<f64>) -> Result<Self> {
        let s_raw = s_points.clone();
        let t_raw = t_points.clone();
        Self::with_raw(s_points, t_points, s_raw, t_raw)
    }

    /// Normalizes raw coordinates onto `[0, 1]` and keeps them as metadata.
    pub fn from_raw(s_raw: Vec<f64>, t_raw: Vec<f64>) -> Result<Self> {
        let s_points = normalize_axis(&s_raw);
        let t_points = normalize_axis(&t_raw);
        Self::with_raw(s_points, t_points, s_raw, t_raw)
    }

    /// Equally spaced midpoint grid `(r - 1/2)/R`, `(l - 1/2)/L`.
    pub fn midpoint(r_len: usize, l_len: usize) -> Self {
        let s: Vec<f64> = (0..r_len).map(|r| (r as f64 + 0.5) / r_len as f64).collect();
        let t: Vec<f64> = (0..l_len).map(|l| (l as f64 + 0.5) / l_len as f64).collect();
        Self::new(s, t).expect("midpoint grid is valid")
    }

    /// Grid from stored normalized points and their raw coordinates.
    pub(crate) fn from_parts(s_points: Vec<f64>, t_points: Vec<f64>, s_raw: Vec<f64>, t_raw: Vec<f64>) -> Result<Self> {
        Self::with_raw(s_points, t_points, s_raw, t_raw)
    }

    fn with_raw(
        s_points: Vec<f64>,
        t_points: Vec<f64>,
        s_raw: Vec<f64>,
        t_raw: Vec<f64>,
    ) -> Result<Self> {
        check_axis("s", &s_points)?;
        check_axis("t", &t_points)?;
        let s_weights = quadrature_weights(&s_points);
        let t_weights = quadrature_weights(&t_points);
        let grid = SamplingGrid {
            s_points,
            t_points,
            s_weights,
            t_weights,
            s_raw,
            t_raw,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        check_axis("s", &self.s_points)?;
        check_axis("t", &self.t_points)?;
        for (name, w, n) in [
            ("s", &self.s_weights, self.s_points.len()),
            ("t", &self.t_weights, self.t_points.len()),
        ] {
            if w.len() != n {
                return Err(FmmError::Validation(format!("{name} weights length mismatch")));
            }
            if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(FmmError::Validation(format!("{name} weights must be positive")));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
                return Err(FmmError::Validation(format!(
                    "{name} weights sum to {sum}, expected 1"
                )));
            }
        }
        if self.s_raw.len() != self.s_points.len() || self.t_raw.len() != self.t_points.len() {
            return Err(FmmError::Validation("raw coordinate length mismatch".into()));
        }
        Ok(())
    }

    pub fn r_len(&self) -> usize {
        self.s_points.len()
    }
    pub fn l_len(&self) -> usize {
        self.t_points.len()
    }
    pub fn n_cells(&self) -> usize {
        self.r_len() * self.l_len()
    }
    pub fn s_points(&self) -> &[f64] {
        &self.s_points
    }
    pub fn t_points(&self) -> &[f64] {
        &self.t_points
    }
    pub fn s_weights(&self) -> &[f64] {
        &self.s_weights
    }
    pub fn t_weights(&self) -> &[f64] {
        &self.t_weights
    }
    pub fn s_raw(&self) -> &[f64] {
        &self.s_raw
    }
    pub fn t_raw(&self) -> &[f64] {
        &self.t_raw
    }

    /// Keeps the `s` indices in `rows`, re-deriving the `s` weights.
    pub(crate) fn select_s(&self, rows: &[usize]) -> Result<Self> {
        let s_points: Vec<f64> = rows.iter().map(|&r| self.s_points[r]).collect();
        let s_raw: Vec<f64> = rows.iter().map(|&r| self.s_raw[r]).collect();
        Self::with_raw(s_points, self.t_points.clone(), s_raw, self.t_raw.clone())
    }

    /// Re-maps the `s` axis affinely onto `[0, 1]`.
    pub(crate) fn renormalize_s(&self) -> Result<Self> {
        let s_points = affine_unit(&self.s_points);
        Self::with_raw(
            s_points,
            self.t_points.clone(),
            self.s_raw.clone(),
            self.t_raw.clone(),
        )
    }
}

fn check_axis(name: &str, points: &[f64]) -> Result<()> {
    if points.is_empty() {
        return Err(FmmError::Validation(format!("{name} axis is empty")));
    }
    if points.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
        return Err(FmmError::Validation(format!("{name} points must lie in [0, 1]")));
    }
    if points.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(FmmError::Validation(format!(
            "{name} points must be strictly increasing"
        )));
    }
    Ok(())
}

/// Points already inside `[0, 1]` are kept; anything else is mapped by
/// `(x - min) / (max - min)`.
pub fn normalize_axis(raw: &[f64]) -> Vec<f64> {
    if raw.iter().all(|x| (0.0..=1.0).contains(x)) {
        return raw.to_vec();
    }
    affine_unit(raw)
}

fn affine_unit(raw: &[f64]) -> Vec<f64> {
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span <= 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter()
        .map(|&x| ((x - min) / span).clamp(0.0, 1.0))
        .collect()
}

/// Midpoint weights `1/n` for equally spaced points, normalized trapezoid
/// weights otherwise.
pub fn quadrature_weights(points: &[f64]) -> Vec<f64> {
    let n = points.len();
    if n <= 2 || is_equally_spaced(points) {
        return vec![1.0 / n as f64; n];
    }
    let mut w = vec![0.0; n];
    w[0] = (points[1] - points[0]) / 2.0;
    w[n - 1] = (points[n - 1] - points[n - 2]) / 2.0;
    for i in 1..n - 1 {
        w[i] = (points[i + 1] - points[i - 1]) / 2.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

fn is_equally_spaced(points: &[f64]) -> bool {
    let n = points.len();
    let h = (points[n - 1] - points[0]) / (n - 1) as f64;
    points
        .windows(2)
        .all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(f64::MIN_POSITIVE))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    TimeInvariant,
    TimeVarying,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CovariateValues {
    /// One value per subject.
    TimeInvariant(Vec<f64>),
    /// One `R x L` matrix per subject.
    TimeVarying(Vec<DMatrix<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub values: CovariateValues,
}

impl Covariate {
    pub fn time_invariant(name: impl Into<String>, values: Vec<f64>) -> Self {
        Covariate {
            name: name.into(),
            values: CovariateValues::TimeInvariant(values),
        }
    }

    pub fn time_varying(name: impl Into<String>, values: Vec<DMatrix<f64>>) -> Self {
        Covariate {
            name: name.into(),
            values: CovariateValues::TimeVarying(values),
        }
    }

    pub fn kind(&self) -> CovariateKind {
        match self.values {
            CovariateValues::TimeInvariant(_) => CovariateKind::TimeInvariant,
            CovariateValues::TimeVarying(_) => CovariateKind::TimeVarying,
        }
    }

    #[inline]
    pub fn value(&self, i: usize, cell: Cell) -> f64 {
        match &self.values {
            CovariateValues::TimeInvariant(v) => v[i],
            CovariateValues::TimeVarying(m) => m[i][(cell.r, cell.l)],
        }
    }

    fn select_subjects(&self, idx: &[usize]) -> Self {
        let values = match &self.values {
            CovariateValues::TimeInvariant(v) => {
                CovariateValues::TimeInvariant(idx.iter().map(|&i| v[i]).collect())
            }
            CovariateValues::TimeVarying(m) => {
                CovariateValues::TimeVarying(idx.iter().map(|&i| m[i].clone()).collect())
            }
        };
        Covariate {
            name: self.name.clone(),
            values,
        }
    }
}

/// `N` subjects' responses on an `R x L` grid plus `P` covariates.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalDataset {
    grid: SamplingGrid,
    y: Vec<DMatrix<f64>>,
    mask: Vec<DMatrix<bool>>,
    covariates: Vec<Covariate>,
    subject_ids: Vec<String>,
}

impl FunctionalDataset {
    /// Builds and validates a dataset. Masked-out responses may hold any value.
    pub fn new(
        grid: SamplingGrid,
        y: Vec<DMatrix<f64>>,
        mask: Vec<DMatrix<bool>>,
        covariates: Vec<Covariate>,
        subject_ids: Vec<String>,
    ) -> Result<Self> {
        let ds = FunctionalDataset {
            grid,
            y,
            mask,
            covariates,
            subject_ids,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Fully observed dataset.
    pub fn complete(
        grid: SamplingGrid,
        y: Vec<DMatrix<f64>>,
        covariates: Vec<Covariate>,
        subject_ids: Vec<String>,
    ) -> Result<Self> {
        let mask = y
            .iter()
            .map(|m| DMatrix::from_element(m.nrows(), m.ncols(), true))
            .collect();
        Self::new(grid, y, mask, covariates, subject_ids)
    }

    fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let (r_len, l_len) = (self.grid.r_len(), self.grid.l_len());
        let n = self.y.len();
        if n == 0 {
            return Err(FmmError::Validation("dataset has no subjects".into()));
        }
        if self.mask.len() != n || self.subject_ids.len() != n {
            return Err(FmmError::Validation(
                "response, mask and subject id counts differ".into(),
            ));
        }
        for (i, (y, m)) in self.y.iter().zip(&self.mask).enumerate() {
            if y.shape() != (r_len, l_len) || m.shape() != (r_len, l_len) {
                return Err(FmmError::Validation(format!(
                    "subject {i} response has shape {:?}, grid is {r_len}x{l_len}",
                    y.shape()
                )));
            }
            for (v, &obs) in y.iter().zip(m.iter()) {
                if obs && !v.is_finite() {
                    return Err(FmmError::Validation(format!(
                        "subject {i} has a non-finite observed response"
                    )));
                }
            }
        }
        for cov in &self.covariates {
            match &cov.values {
                CovariateValues::TimeInvariant(v) => {
                    if v.len() != n {
                        return Err(FmmError::Validation(format!(
                            "covariate {} has {} values for {n} subjects",
                            cov.name,
                            v.len()
                        )));
                    }
                    if v.iter().any(|x| !x.is_finite()) {
                        return Err(FmmError::Validation(format!(
                            "covariate {} has non-finite values",
                            cov.name
                        )));
                    }
                }
                CovariateValues::TimeVarying(m) => {
                    if m.len() != n || m.iter().any(|x| x.shape() != (r_len, l_len)) {
                        return Err(FmmError::Validation(format!(
                            "time-varying covariate {} does not match the grid",
                            cov.name
                        )));
                    }
                    if m.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
                        return Err(FmmError::Validation(format!(
                            "covariate {} has non-finite values",
                            cov.name
                        )));
                    }
                }
            }
        }
        let required = self.n_covariates() + 2;
        for l in 0..l_len {
            for r in 0..r_len {
                let observed = self.mask.iter().filter(|m| m[(r, l)]).count();
                if observed < required {
                    return Err(FmmError::TooFewSubjects {
                        cell: Cell::new(r, l),
                        observed,
                        required,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> &SamplingGrid {
        &self.grid
    }
    pub fn responses(&self) -> &[DMatrix<f64>] {
        &self.y
    }
    pub fn mask(&self) -> &[DMatrix<bool>] {
        &self.mask
    }
    pub fn covariates(&self) -> &[Covariate] {
        &self.covariates
    }
    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }
    pub fn n_subjects(&self) -> usize {
        self.y.len()
    }
    /// Number of covariates `P`, excluding the intercept.
    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }
    pub fn n_coefficients(&self) -> usize {
        self.covariates.len() + 1
    }

    #[inline]
    pub fn is_observed(&self, i: usize, cell: Cell) -> bool {
        self.mask[i][(cell.r, cell.l)]
    }

    pub fn fully_observed(&self) -> bool {
        self.mask.iter().all(|m| m.iter().all(|&b| b))
    }

    pub fn all_time_invariant(&self) -> bool {
        self.covariates
            .iter()
            .all(|c| c.kind() == CovariateKind::TimeInvariant)
    }

    /// Value of coefficient column `p` (0 = intercept) for subject `i`.
    #[inline]
    pub fn design_value(&self, i: usize, p: usize, cell: Cell) -> f64 {
        if p == 0 {
            1.0
        } else {
            self.covariates[p - 1].value(i, cell)
        }
    }

    pub fn observed_subjects(&self, cell: Cell) -> Vec<usize> {
        (0..self.n_subjects())
            .filter(|&i| self.is_observed(i, cell))
            .collect()
    }

    /// Design rows and responses at a cell, without rank checks.
    pub(crate) fn cell_system(&self, cell: Cell) -> (DMatrix<f64>, DVector<f64>, Vec<usize>) {
        let subjects = self.observed_subjects(cell);
        let q = self.n_coefficients();
        let x = DMatrix::from_fn(subjects.len(), q, |row, p| {
            self.design_value(subjects[row], p, cell)
        });
        let y = DVector::from_iterator(
            subjects.len(),
            subjects.iter().map(|&i| self.y[i][(cell.r, cell.l)]),
        );
        (x, y, subjects)
    }

    /// Subset (with repetition) of subjects, used for bootstrap resampling.
    pub(crate) fn select_subjects(&self, idx: &[usize]) -> Self {
        FunctionalDataset {
            grid: self.grid.clone(),
            y: idx.iter().map(|&i| self.y[i].clone()).collect(),
            mask: idx.iter().map(|&i| self.mask[i].clone()).collect(),
            covariates: self
                .covariates
                .iter()
                .map(|c| c.select_subjects(idx))
                .collect(),
            subject_ids: idx.iter().map(|&i| self.subject_ids[i].clone()).collect(),
        }
    }

    /// Keeps only the `s` rows listed, in order.
    pub(crate) fn select_s_rows(&self, rows: &[usize], renormalize: bool) -> Result<Self> {
        let mut grid = self.grid.select_s(rows)?;
        if renormalize {
            grid = grid.renormalize_s()?;
        }
        let l_len = self.grid.l_len();
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(rows.len(), l_len, |a, l| m[(rows[a], l)]);
        let covariates = self
            .covariates
            .iter()
            .map(|c| Covariate {
                name: c.name.clone(),
                values: match &c.values {
                    CovariateValues::TimeInvariant(v) => CovariateValues::TimeInvariant(v.clone()),
                    CovariateValues::TimeVarying(m) => {
                        CovariateValues::TimeVarying(m.iter().map(pick).collect())
                    }
                },
            })
            .collect();
        FunctionalDataset::new(
            grid,
            self.y.iter().map(pick).collect(),
            self.mask
                .iter()
                .map(|m| DMatrix::from_fn(rows.len(), l_len, |a, l| m[(rows[a], l)]))
                .collect(),
            covariates,
            self.subject_ids.clone(),
        )
    }
}

/// Intercept-led design matrix at a cell over the observed subjects.
///
/// Fails with [`FmmError::Collinear`] when a column lies in the span of the
/// preceding ones.
pub fn design_matrix_at(ds: &FunctionalDataset, cell: Cell) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if cell.r >= ds.grid.r_len() || cell.l >= ds.grid.l_len() {
        return Err(FmmError::Dimension(format!(
            "cell ({}, {}) outside the {}x{} grid",
            cell.r,
            cell.l,
            ds.grid.r_len(),
            ds.grid.l_len()
        )));
    }
    let (x, _, subjects) = ds.cell_system(cell);
    check_column_rank(&x, cell)?;
    Ok((x, subjects))
}

/// Sequential Gram-Schmidt rank check that names the offending columns.
fn check_column_rank(x: &DMatrix<f64>, cell: Cell) -> Result<()> {
    let mut basis: Vec<(usize, DVector<f64>)> = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut resid = col.clone();
        let mut involved = Vec::new();
        for (k, q) in &basis {
            let c = q.dot(&resid);
            if c.abs() > 1e-12 * norm.max(1.0) {
                involved.push(*k);
            }
            resid -= q * c;
        }
        let rnorm = resid.norm();
        if norm == 0.0 || rnorm <= 1e-10 * norm {
            return Err(FmmError::Collinear {
                cell,
                column: j,
                with: involved,
            });
        }
        basis.push((j, resid / rnorm));
    }
    Ok(())
}

/// Column names of a long CSV file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub id: String,
    pub s: String,
    pub t: String,
    pub y: String,
    /// `None` takes every remaining column as a covariate, in file order.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            id: "id".into(),
            s: "s".into(),
            t: "t".into(),
            y: "y".into(),
            covariates: None,
        }
    }
}

struct LongRow {
    line: usize,
    subject: usize,
    s: f64,
    t: f64,
    y: f64,
    covs: Vec<f64>,
}

/// Loads a long-format CSV (`id,s,t,y,<covariates...>`).
pub fn load_long_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<FunctionalDataset> {
    let path = path.as_ref();
    let file_name = path.display().to_string();
    let file = File::open(path).map_err(|e| FmmError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: usize, message: String| FmmError::Parse {
        file: file_name.clone(),
        line,
        message,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let (id_col, s_col, t_col, y_col) = (
        find(&schema.id)?,
        find(&schema.s)?,
        find(&schema.t)?,
        find(&schema.y)?,
    );
    let cov_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .enumerate()
            .filter(|(k, _)| ![id_col, s_col, t_col, y_col].contains(k))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let cov_cols = cov_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<Vec<_>>>()?;

    let mut subject_index: HashMap<String, usize> = HashMap::new();
    let mut subject_ids: Vec<String> = Vec::new();
    let mut rows: Vec<LongRow> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        let field = |c: usize| record.get(c).unwrap_or("");
        let number = |c: usize, what: &str| -> Result<f64> {
            let raw = field(c);
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(line, format!("non-numeric {what} `{raw}`")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite {what} `{raw}`")));
            }
            Ok(v)
        };
        let id = field(id_col).to_string();
        let subject = *subject_index.entry(id.clone()).or_insert_with(|| {
            subject_ids.push(id);
            subject_ids.len() - 1
        });
        let covs = cov_cols
            .iter()
            .zip(&cov_names)
            .map(|(&c, name)| number(c, name))
            .collect::<Result<Vec<_>>>()?;
        rows.push(LongRow {
            line,
            subject,
            s: number(s_col, "s")?,
            t: number(t_col, "t")?,
            y: number(y_col, "response")?,
            covs,
        });
    }
    if rows.is_empty() {
        return Err(parse_err(2, "file has no data rows".into()));
    }

    let s_raw = unique_sorted(rows.iter().map(|r| r.s));
    let t_raw = unique_sorted(rows.iter().map(|r| r.t));
    let (n, r_len, l_len, p) = (subject_ids.len(), s_raw.len(), t_raw.len(), cov_names.len());
    let locate = |axis: &[f64], v: f64| axis.binary_search_by(|x| x.total_cmp(&v)).unwrap();

    let mut seen: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let mut duplicates: Vec<usize> = Vec::new();
    let mut y = vec![DMatrix::zeros(r_len, l_len); n];
    let mut mask = vec![DMatrix::from_element(r_len, l_len, false); n];
    let mut cov_tensor = vec![vec![DMatrix::zeros(r_len, l_len); n]; p];
    let mut first_cov: Vec<Vec<Option<f64>>> = vec![vec![None; n]; p];
    let mut varies = vec![false; p];
    for row in &rows {
        let (r, l) = (locate(&s_raw, row.s), locate(&t_raw, row.t));
        if let Some(&prev) = seen.get(&(row.subject, r, l)) {
            if !duplicates.contains(&prev) {
                duplicates.push(prev);
            }
            duplicates.push(row.line);
            continue;
        }
        seen.insert((row.subject, r, l), row.line);
        y[row.subject][(r, l)] = row.y;
        mask[row.subject][(r, l)] = true;
        for (k, &v) in row.covs.iter().enumerate() {
            cov_tensor[k][row.subject][(r, l)] = v;
            match first_cov[k][row.subject] {
                None => first_cov[k][row.subject] = Some(v),
                Some(f) if f != v => varies[k] = true,
                _ => {}
            }
        }
    }
    if !duplicates.is_empty() {
        duplicates.sort_unstable();
        return Err(FmmError::DuplicateRows { rows: duplicates });
    }
    let covariates = cov_names
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            if varies[k] {
                Covariate::time_varying(name, std::mem::take(&mut cov_tensor[k]))
            } else {
                Covariate::time_invariant(
                    name,
                    first_cov[k].iter().map(|v| v.unwrap_or(0.0)).collect(),
                )
            }
        })
        .collect();
    let grid = SamplingGrid::from_raw(s_raw, t_raw)?;
    FunctionalDataset::new(grid, y, mask, covariates, subject_ids)
}

fn unique_sorted(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(|a, b| a.total_cmp(b));
    v.dedup();
    v
}

/// Writes the dataset in long format using raw grid coordinates.
pub fn write_long_csv(ds: &FunctionalDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| FmmError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| FmmError::io(path, e);
    let mut header = String::from("id,s,t,y");
    for c in ds.covariates() {
        header.push(',');
        header.push_str(&c.name);
    }
    writeln!(w, "{header}").map_err(io)?;
    let grid = ds.grid();
    for i in 0..ds.n_subjects() {
        for r in 0..grid.r_len() {
            for l in 0..grid.l_len() {
                let cell = Cell::new(r, l);
                if !ds.is_observed(i, cell) {
                    continue;
                }
                let mut line = format!(
                    "{},{},{},{}",
                    ds.subject_ids()[i],
                    grid.s_raw()[r],
                    grid.t_raw()[l],
                    ds.responses()[i][(r, l)]
                );
                for c in ds.covariates() {
                    line.push(',');
                    line.push_str(&c.value(i, cell).to_string());
                }
                writeln!(w, "{line}").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// One `R x L` CSV per subject (`NA` where unobserved), named by subject id.
pub fn write_wide_matrices(ds: &FunctionalDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| FmmError::io(dir, e))?;
    for (i, id) in ds.subject_ids().iter().enumerate() {
        let path = dir.join(format!("{id}.csv"));
        let file = File::create(&path).map_err(|e| FmmError::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let y = &ds.responses()[i];
        for r in 0..y.nrows() {
            let row: Vec<String> = (0..y.ncols())
                .map(|l| {
                    if ds.is_observed(i, Cell::new(r, l)) {
                        y[(r, l)].to_string()
                    } else {
                        "NA".to_string()
                    }
                })
                .collect();
            writeln!(w, "{}", row.join(",")).map_err(|e| FmmError::io(&path, e))?;
        }
        w.flush().map_err(|e| FmmError::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(n: usize, r_len: usize, l_len: usize) -> FunctionalDataset {
        let grid = SamplingGrid::midpoint(r_len, l_len);
        let y = (0..n)
            .map(|i| DMatrix::from_fn(r_len, l_len, |r, l| (i + r + l) as f64))
            .collect();
        let x = (0..n).map(|i| (i + 1) as f64).collect();
        FunctionalDataset::complete(
            grid,
            y,
            vec![Covariate::time_invariant("x", x)],
            (0..n).map(|i| format!("s{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn midpoint_weights_sum_to_one() {
        let g = SamplingGrid::midpoint(7, 1440);
        assert!((g.s_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((g.t_weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g.s_weights()[0], 1.0 / 7.0);
    }

    #[test]
    fn irregular_axis_uses_trapezoid() {
        let w = quadrature_weights(&[0.0, 0.1, 0.5, 1.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((w[0] - 0.05).abs() < 1e-12);
        assert!((w[2] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn raw_days_and_minutes_normalize_affinely() {
        let s: Vec<f64> = (1..=7).map(f64::from).collect();
        let t: Vec<f64> = (0..1440).map(f64::from).collect();
        let g = SamplingGrid::from_raw(s.clone(), t.clone()).unwrap();
        for (k, &x) in s.iter().enumerate() {
            assert!((g.s_points()[k] - (x - 1.0) / 6.0).abs() < 1e-15);
        }
        assert_eq!(g.t_points()[1439], 1.0);
        assert_eq!(g.s_raw(), &s[..]);
    }

    #[test]
    fn unit_interval_grids_are_left_alone() {
        let s = vec![0.05, 0.15, 0.55];
        assert_eq!(normalize_axis(&s), s);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(SamplingGrid::new(vec![0.2, 0.1], vec![0.5]).is_err());
        assert!(SamplingGrid::new(vec![0.1, 1.2], vec![0.5]).is_err());
    }

    #[test]
    fn intercept_only_design() {
        let grid = SamplingGrid::midpoint(2, 2);
        let y = (0..5).map(|_| DMatrix::zeros(2, 2)).collect();
        let ds = FunctionalDataset::complete(
            grid,
            y,
            vec![],
            (0..5).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let (x, subjects) = design_matrix_at(&ds, Cell::new(1, 0)).unwrap();
        assert_eq!(x, DMatrix::from_element(5, 1, 1.0));
        assert_eq!(subjects, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn time_invariant_design_layout() {
        let ds = tiny(3, 2, 2);
        let (x, _) = design_matrix_at(&ds, Cell::new(0, 1)).unwrap();
        assert_eq!(x, DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 3.0]));
    }

    #[test]
    fn masked_subject_dropped_from_design() {
        let (n, r_len, l_len) = (5, 2, 3);
        let grid = SamplingGrid::midpoint(r_len, l_len);
        let y: Vec<_> = (0..n).map(|_| DMatrix::zeros(r_len, l_len)).collect();
        let mut mask: Vec<_> = (0..n)
            .map(|_| DMatrix::from_element(r_len, l_len, true))
            .collect();
        mask[2][(1, 2)] = false;
        let cov: Vec<_> = (0..n)
            .map(|i| DMatrix::from_fn(r_len, l_len, |r, l| (10 * i + 3 * r + l) as f64))
            .collect();
        let ds = FunctionalDataset::new(
            grid,
            y,
            mask,
            vec![Covariate::time_varying("z", cov.clone())],
            (0..n).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        let cell = Cell::new(1, 2);
        let (x, subjects) = design_matrix_at(&ds, cell).unwrap();
        assert_eq!(subjects, vec![0, 1, 3, 4]);
        // oracle: filter by mask, then read the covariate at the cell
        let expected: Vec<f64> = (0..n)
            .filter(|&i| i != 2)
            .map(|i| cov[i][(1, 2)])
            .collect();
        assert_eq!(x.column(1).iter().copied().collect::<Vec<_>>(), expected);
        assert!(x.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn collinear_columns_are_named() {
        let grid = SamplingGrid::midpoint(1, 1);
        let y = (0..4).map(|_| DMatrix::zeros(1, 1)).collect();
        let ds = FunctionalDataset::complete(
            grid,
            y,
            vec![
                Covariate::time_invariant("a", vec![1.0, 2.0, 3.0, 4.0]),
                Covariate::time_invariant("b", vec![2.0, 4.0, 6.0, 8.0]),
            ],
            (0..4).map(|i| i.to_string()).collect(),
        )
        .unwrap();
        match design_matrix_at(&ds, Cell::new(0, 0)) {
            Err(FmmError::Collinear { column, with, .. }) => {
                assert_eq!(column, 2);
                assert!(with.contains(&1));
            }
            other => panic!("expected collinearity error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_subjects_fails_validation() {
        let grid = SamplingGrid::midpoint(1, 2);
        let y: Vec<_> = (0..3).map(|_| DMatrix::zeros(1, 2)).collect();
        let mut mask: Vec<_> = (0..3).map(|_| DMatrix::from_element(1, 2, true)).collect();
        mask[0][(0, 1)] = false;
        let err = FunctionalDataset::new(
            grid,
            y,
            mask,
            vec![Covariate::time_invariant("x", vec![1.0, 2.0, 3.0])],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            FmmError::TooFewSubjects {
                cell: Cell { r: 0, l: 1 },
                observed: 2,
                required: 3
            }
        ));
    }

    #[test]
    fn full_dataset_has_n_rows_everywhere() {
        let ds = tiny(6, 3, 4);
        for r in 0..3 {
            for l in 0..4 {
                assert_eq!(design_matrix_at(&ds, Cell::new(r, l)).unwrap().0.nrows(), 6);
            }
        }
    }
}
