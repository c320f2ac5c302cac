//! Centered residuals, marginal covariance over `s`, eigenfunctions, score
//! covariances over `t`, and the assembled four-dimensional covariance.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FmmError, Result};
use crate::grid::{Cell, FunctionalDataset, SamplingGrid};
use crate::linalg::{psd_project, sym_eigen_desc, symmetrize};
use crate::smooth::{axis_spec, bspline_basis, default_knots_t, SplineBasisSpec};

pub const DEFAULT_FVE: f64 = 0.99;
/// Local-linear bandwidth in units of the mean `s` spacing.
pub const BANDWIDTH_SPACINGS: f64 = 2.0;
/// Below this many `s` points the marginal covariance is not kernel smoothed.
pub const MIN_SMOOTHING_POINTS: usize = 5;

/// Residual surfaces `Y_i - mu(s, t, X_i)` with the dataset's mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualTensor {
    pub values: Vec<DMatrix<f64>>,
    pub mask: Vec<DMatrix<bool>>,
}

impl ResidualTensor {
    /// Fully observed surfaces.
    pub fn complete(values: Vec<DMatrix<f64>>) -> Self {
        let mask = values
            .iter()
            .map(|m| DMatrix::from_element(m.nrows(), m.ncols(), true))
            .collect();
        ResidualTensor { values, mask }
    }

    pub fn n_subjects(&self) -> usize {
        self.values.len()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ResidualTensor {
            values: self.values.iter().map(|m| m * factor).collect(),
            mask: self.mask.clone(),
        }
    }
}

/// Subtracts the fitted mean surface from every subject; masked entries stay
/// masked and hold zero.
pub fn center_residuals(ds: &FunctionalDataset, beta_hat: &[DMatrix<f64>]) -> ResidualTensor {
    let grid = ds.grid();
    let (r_len, l_len) = (grid.r_len(), grid.l_len());
    let values = (0..ds.n_subjects())
        .map(|i| {
            DMatrix::from_fn(r_len, l_len, |r, l| {
                let cell = Cell::new(r, l);
                if !ds.is_observed(i, cell) {
                    return 0.0;
                }
                let mean: f64 = beta_hat
                    .iter()
                    .enumerate()
                    .map(|(p, b)| ds.design_value(i, p, cell) * b[(r, l)])
                    .sum();
                ds.responses()[i][(r, l)] - mean
            })
        })
        .collect();
    ResidualTensor {
        values,
        mask: ds.mask().to_vec(),
    }
}

/// Sample marginal covariance over `s`, averaging over subjects and `t`
/// (weighted by the `t` quadrature) across jointly observed entries.
pub fn marginal_cov_raw(res: &ResidualTensor, grid: &SamplingGrid) -> Result<DMatrix<f64>> {
    let r_len = grid.r_len();
    let tw = grid.t_weights();
    let mut num = DMatrix::<f64>::zeros(r_len, r_len);
    let mut den = DMatrix::<f64>::zeros(r_len, r_len);
    for (y, m) in res.values.iter().zip(&res.mask) {
        for (l, &w) in tw.iter().enumerate() {
            for a in 0..r_len {
                if !m[(a, l)] {
                    continue;
                }
                let ya = y[(a, l)] * w;
                for b in a..r_len {
                    if m[(b, l)] {
                        num[(a, b)] += ya * y[(b, l)];
                        den[(a, b)] += w;
                    }
                }
            }
        }
    }
    let mut out = DMatrix::zeros(r_len, r_len);
    for a in 0..r_len {
        for b in a..r_len {
            if den[(a, b)] <= 0.0 {
                return Err(FmmError::Degenerate(format!(
                    "s-points {a} and {b} are never observed together"
                )));
            }
            out[(a, b)] = num[(a, b)] / den[(a, b)];
            out[(b, a)] = out[(a, b)];
        }
    }
    Ok(out)
}

/// Smoothed marginal covariance and the white-noise variance it implies.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalSmooth {
    pub c_hat: DMatrix<f64>,
    pub phi2: f64,
    pub warnings: Vec<String>,
}

fn epanechnikov(u: f64) -> f64 {
    (1.0 - u * u).max(0.0)
}

/// Bandwidth growth factor applied where the local design is singular.
const WIDEN: f64 = 1.25;
const MAX_WIDEN_STEPS: usize = 8;

/// Local-linear surface through the off-diagonal entries, evaluated at
/// `(x, y)`. `None` when the weighted design is singular.
fn local_linear_at(c_raw: &DMatrix<f64>, s: &[f64], h: f64, x: f64, y: f64) -> Option<f64> {
    let n = s.len();
    let mut xtx = nalgebra::Matrix3::<f64>::zeros();
    let mut xty = nalgebra::Vector3::<f64>::zeros();
    for a in 0..n {
        let ka = epanechnikov((s[a] - x) / h);
        if ka == 0.0 {
            continue;
        }
        for b in 0..n {
            if a == b {
                continue;
            }
            let w = ka * epanechnikov((s[b] - y) / h);
            let row = nalgebra::Vector3::new(1.0, s[a] - x, s[b] - y);
            xtx += w * row * row.transpose();
            xty += w * row * c_raw[(a, b)];
        }
    }
    let scale = xtx.amax();
    if scale <= 0.0 {
        return None;
    }
    let sv = xtx.singular_values();
    if sv.min() < 1e-10 * sv.max() {
        return None;
    }
    xtx.lu().solve(&xty).map(|beta| beta[0])
}

/// Diagonal interpolated from the first off-diagonal.
fn interpolated_diagonal(c_raw: &DMatrix<f64>) -> DVector<f64> {
    let n = c_raw.nrows();
    DVector::from_fn(n, |r, _| {
        let left = (r > 0).then(|| c_raw[(r - 1, r)]);
        let right = (r + 1 < n).then(|| c_raw[(r, r + 1)]);
        match (left, right) {
            (Some(a), Some(b)) => 0.5 * (a + b),
            (Some(a), None) | (None, Some(a)) => a,
            (None, None) => c_raw[(r, r)],
        }
    })
}

/// Kernel local-linear smoothing of the off-diagonal entries (Epanechnikov
/// kernel, half-width of two mean spacings, widened locally where too few
/// off-diagonal points fall inside), PSD clipping, and
/// `phi2 = max(0, mean(diag(C_raw) - diag(C_hat)))`.
///
/// With fewer than five `s` points the raw matrix is kept, its diagonal is
/// replaced by one interpolated from the neighbouring off-diagonal entries,
/// and a warning is recorded.
pub fn smooth_marginal_cov(c_raw: &DMatrix<f64>, grid: &SamplingGrid) -> Result<MarginalSmooth> {
    let r_len = c_raw.nrows();
    if r_len != grid.r_len() || c_raw.ncols() != r_len {
        return Err(FmmError::Dimension(format!(
            "marginal covariance is {}x{}, grid has {} s-points",
            c_raw.nrows(),
            c_raw.ncols(),
            grid.r_len()
        )));
    }
    let mut warnings = Vec::new();
    let s = grid.s_points();
    let smoothed = if r_len >= MIN_SMOOTHING_POINTS {
        let spacing = (s[r_len - 1] - s[0]) / (r_len - 1) as f64;
        let h = BANDWIDTH_SPACINGS * spacing;
        let mut out = DMatrix::zeros(r_len, r_len);
        let mut ok = true;
        'outer: for a in 0..r_len {
            for b in a..r_len {
                let fit = (0..=MAX_WIDEN_STEPS)
                    .find_map(|k| local_linear_at(c_raw, s, h * WIDEN.powi(k as i32), s[a], s[b]));
                match fit {
                    Some(v) => {
                        out[(a, b)] = v;
                        out[(b, a)] = v;
                    }
                    None => {
                        ok = false;
                        break 'outer;
                    }
                }
            }
        }
        ok.then_some(out)
    } else {
        None
    };
    let smoothed = match smoothed {
        Some(m) => m,
        None => {
            warnings.push(format!(
                "marginal covariance over {r_len} s-points not kernel smoothed; diagonal interpolated from neighbours"
            ));
            let mut m = c_raw.clone();
            m.set_diagonal(&interpolated_diagonal(c_raw));
            m
        }
    };
    let c_hat = psd_project(&symmetrize(&smoothed));
    let diff: f64 = (0..r_len).map(|r| c_raw[(r, r)] - c_hat[(r, r)]).sum::<f64>() / r_len as f64;
    Ok(MarginalSmooth {
        c_hat,
        phi2: diff.max(0.0),
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalEigensystem {
    /// `R x J`, orthonormal under the `s` quadrature.
    pub psi: DMatrix<f64>,
    pub tau: DVector<f64>,
    pub fve_achieved: f64,
    pub phi2: f64,
    pub c_w_smoothed: DMatrix<f64>,
}

impl MarginalEigensystem {
    pub fn n_components(&self) -> usize {
        self.tau.len()
    }
}

/// Weighted eigenproblem `W^{1/2} C W^{1/2}`, truncated at the smallest `J`
/// reaching the FVE threshold.
pub fn eigendecompose_marginal(
    c_hat: &DMatrix<f64>,
    grid: &SamplingGrid,
    fve_threshold: f64,
    phi2: f64,
) -> Result<MarginalEigensystem> {
    if !(fve_threshold > 0.0 && fve_threshold <= 1.0) {
        return Err(FmmError::Config(format!(
            "FVE threshold {fve_threshold} outside (0, 1]"
        )));
    }
    let w: Vec<f64> = grid.s_weights().iter().map(|w| w.sqrt()).collect();
    let r_len = c_hat.nrows();
    let a = DMatrix::from_fn(r_len, r_len, |i, j| w[i] * c_hat[(i, j)] * w[j]);
    let (values, vectors) = sym_eigen_desc(&a);
    let tr: f64 = a.diagonal().sum();
    let positive: f64 = values.iter().filter(|&&v| v > 0.0).sum();
    if !(values[0] > 1e-12 * tr.abs()) || positive <= 0.0 || !tr.is_finite() {
        return Err(FmmError::Degenerate(
            "marginal covariance has no positive eigenvalues".into(),
        ));
    }
    let mut j = 0;
    let mut acc = 0.0;
    while j < r_len && values[j] > 0.0 {
        acc += values[j];
        j += 1;
        if acc / positive >= fve_threshold - 1e-12 {
            break;
        }
    }
    let mut psi = DMatrix::from_fn(r_len, j, |r, k| vectors[(r, k)] / w[r]);
    for mut col in psi.column_iter_mut() {
        let (idx, _) = col
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bv), (i, &v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        if col[idx] < 0.0 {
            col.neg_mut();
        }
    }
    Ok(MarginalEigensystem {
        psi,
        tau: DVector::from_iterator(j, values.iter().take(j).copied()),
        fve_achieved: (acc / positive).min(1.0),
        phi2,
        c_w_smoothed: c_hat.clone(),
    })
}

/// Score functions `xi_{i,j}(t_l)`; `observed[i][(j, l)]` is false where the
/// whole `s` column was masked.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    /// One `J x L` matrix per subject.
    pub values: Vec<DMatrix<f64>>,
    pub observed: Vec<DMatrix<bool>>,
}

/// Quadrature projection of each residual column onto the eigenfunctions,
/// with weights renormalized over observed `s`.
pub fn extract_scores(res: &ResidualTensor, eigen: &MarginalEigensystem, grid: &SamplingGrid) -> ScoreTensor {
    let sw = grid.s_weights();
    let total: f64 = sw.iter().sum();
    let j_len = eigen.n_components();
    let l_len = grid.l_len();
    let (values, observed): (Vec<_>, Vec<_>) = res
        .values
        .par_iter()
        .zip(res.mask.par_iter())
        .map(|(y, m)| {
            let mut xi = DMatrix::zeros(j_len, l_len);
            let mut obs = DMatrix::from_element(j_len, l_len, true);
            for l in 0..l_len {
                let wsum: f64 = (0..grid.r_len()).filter(|&r| m[(r, l)]).map(|r| sw[r]).sum();
                if wsum <= 0.0 {
                    for j in 0..j_len {
                        obs[(j, l)] = false;
                    }
                    continue;
                }
                let scale = total / wsum;
                for j in 0..j_len {
                    let mut acc = 0.0;
                    for r in 0..grid.r_len() {
                        if m[(r, l)] {
                            acc += sw[r] * y[(r, l)] * eigen.psi[(r, j)];
                        }
                    }
                    xi[(j, l)] = acc * scale;
                }
            }
            (xi, obs)
        })
        .unzip();
    ScoreTensor { values, observed }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreCovariance {
    pub basis_spec: SplineBasisSpec,
    /// One `J x K` coefficient matrix per subject.
    pub coeffs: Vec<DMatrix<f64>>,
    /// `M_j = N^{-1} sum_i b_ij b_ij^T`, each `K x K`.
    pub m: Vec<DMatrix<f64>>,
}

/// Spline spec used for the score curves: `K_L` by default, floored at
/// `degree + 1` and capped at `L`.
pub fn score_basis_spec(l_len: usize, n_subjects: usize, knots: Option<usize>) -> SplineBasisSpec {
    let k = knots
        .unwrap_or_else(|| default_knots_t(l_len, n_subjects))
        .min(l_len);
    axis_spec(l_len, k)
}

/// Least-squares B-spline fit of every score curve over its observed `t`
/// points (minimum-norm solution when the observed points do not pin down
/// all coefficients), then `M_j`.
pub fn fit_score_covariance(
    scores: &ScoreTensor,
    grid: &SamplingGrid,
    spec: SplineBasisSpec,
) -> Result<ScoreCovariance> {
    let l_len = grid.l_len();
    if spec.num_basis > l_len {
        return Err(FmmError::Spec(format!(
            "{} score basis functions exceed {} t-points",
            spec.num_basis, l_len
        )));
    }
    let basis = bspline_basis(&spec, grid.t_points())?;
    let k = spec.num_basis;
    let full_pinv = pseudo_inverse(&basis)?;
    let coeffs: Vec<Result<DMatrix<f64>>> = scores
        .values
        .par_iter()
        .zip(scores.observed.par_iter())
        .map(|(xi, obs)| {
            let j_len = xi.nrows();
            let mut b = DMatrix::zeros(j_len, k);
            for j in 0..j_len {
                let rows: Vec<usize> = (0..l_len).filter(|&l| obs[(j, l)]).collect();
                if rows.is_empty() {
                    continue;
                }
                let coef = if rows.len() == l_len {
                    &full_pinv * xi.row(j).transpose()
                } else {
                    let sub = basis.select_rows(&rows);
                    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&l| xi[(j, l)]));
                    pseudo_inverse(&sub)? * y
                };
                b.row_mut(j).copy_from(&coef.transpose());
            }
            Ok(b)
        })
        .collect();
    let coeffs = coeffs.into_iter().collect::<Result<Vec<_>>>()?;
    let n = coeffs.len().max(1) as f64;
    let j_len = coeffs.first().map_or(0, |c| c.nrows());
    let m = (0..j_len)
        .map(|j| {
            let mut acc = DMatrix::zeros(k, k);
            for c in &coeffs {
                let b = c.row(j).transpose();
                acc += &b * b.transpose();
            }
            symmetrize(&(acc / n))
        })
        .collect();
    Ok(ScoreCovariance {
        basis_spec: spec,
        coeffs,
        m,
    })
}

fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = m.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-10 * m.nrows().max(m.ncols()) as f64;
    svd.pseudo_inverse(tol)
        .map_err(|e| FmmError::Degenerate(format!("pseudo-inverse failed: {e}")))
}

/// Assembled covariance of the random process and the noise.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceModel {
    pub grid: SamplingGrid,
    pub eigen: MarginalEigensystem,
    pub scores: ScoreCovariance,
    /// Smoothed pointwise variance, trimmed nonnegative.
    pub sigma2_smoothed: DMatrix<f64>,
    basis_t: DMatrix<f64>,
    /// `Theta_j = B M_j B^T` on the `t` grid.
    theta: Vec<DMatrix<f64>>,
}

impl CovarianceModel {
    pub fn new(
        grid: SamplingGrid,
        eigen: MarginalEigensystem,
        scores: ScoreCovariance,
        sigma2_smoothed: DMatrix<f64>,
    ) -> Result<Self> {
        if eigen.psi.nrows() != grid.r_len()
            || sigma2_smoothed.shape() != (grid.r_len(), grid.l_len())
            || scores.m.len() != eigen.n_components()
        {
            return Err(FmmError::Dimension(
                "covariance model pieces disagree on the grid or J".into(),
            ));
        }
        let basis_t = bspline_basis(&scores.basis_spec, grid.t_points())?;
        let theta = scores
            .m
            .iter()
            .map(|m| symmetrize(&(&basis_t * m * basis_t.transpose())))
            .collect();
        Ok(CovarianceModel {
            grid,
            eigen,
            scores,
            sigma2_smoothed,
            basis_t,
            theta,
        })
    }

    pub fn n_components(&self) -> usize {
        self.eigen.n_components()
    }

    /// B-spline basis of the score curves on the `t` grid (`L x K`).
    pub fn basis_t(&self) -> &DMatrix<f64> {
        &self.basis_t
    }

    /// `Theta_j(t_l1, t_l2)` on the grid.
    pub fn theta(&self, j: usize) -> &DMatrix<f64> {
        &self.theta[j]
    }

    /// Same model with `C` and `sigma2` multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let scores = ScoreCovariance {
            basis_spec: self.scores.basis_spec,
            coeffs: self.scores.coeffs.clone(),
            m: self.scores.m.iter().map(|m| m * factor).collect(),
        };
        CovarianceModel::new(
            self.grid.clone(),
            self.eigen.clone(),
            scores,
            &self.sigma2_smoothed * factor,
        )
        .expect("scaling preserves shapes")
    }
}

/// `C(c1; c2) = sum_j psi_j(s1) psi_j(s2) B(t1)^T M_j B(t2)`.
pub fn eval_c(model: &CovarianceModel, c1: Cell, c2: Cell) -> f64 {
    let psi = &model.eigen.psi;
    (0..model.n_components())
        .map(|j| psi[(c1.r, j)] * psi[(c2.r, j)] * model.theta[j][(c1.l, c2.l)])
        .sum()
}

/// `sigma(c1; c2) = C(c1; c2) + sigma2(c1) 1{c1 = c2}`.
pub fn eval_sigma(model: &CovarianceModel, c1: Cell, c2: Cell) -> f64 {
    let c = eval_c(model, c1, c2);
    if c1 == c2 {
        c + model.sigma2_smoothed[(c1.r, c1.l)]
    } else {
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceConfig {
    pub fve: f64,
    pub knots_t: Option<usize>,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        CovarianceConfig {
            fve: DEFAULT_FVE,
            knots_t: None,
        }
    }
}

/// Marginal decomposition of a residual tensor: eigensystem, scores and
/// score covariances, plus smoothing warnings.
pub fn decompose(
    res: &ResidualTensor,
    grid: &SamplingGrid,
    config: &CovarianceConfig,
) -> Result<(MarginalEigensystem, ScoreCovariance, Vec<String>)> {
    let c_raw = marginal_cov_raw(res, grid)?;
    let smooth = smooth_marginal_cov(&c_raw, grid)?;
    let eigen = eigendecompose_marginal(&smooth.c_hat, grid, config.fve, smooth.phi2)?;
    let scores = extract_scores(res, &eigen, grid);
    let spec = score_basis_spec(grid.l_len(), res.n_subjects(), config.knots_t);
    let score_cov = fit_score_covariance(&scores, grid, spec)?;
    Ok((eigen, score_cov, smooth.warnings))
}

/// Full covariance estimate from a dataset and its smoothed mean surfaces.
pub fn fit_covariance(
    ds: &FunctionalDataset,
    beta_hat: &[DMatrix<f64>],
    sigma2_smoothed: DMatrix<f64>,
    config: &CovarianceConfig,
) -> Result<(CovarianceModel, Vec<String>)> {
    let res = center_residuals(ds, beta_hat);
    let (eigen, scores, warnings) = decompose(&res, ds.grid(), config)?;
    let model = CovarianceModel::new(ds.grid().clone(), eigen, scores, sigma2_smoothed)?;
    Ok((model, warnings))
}

pub const BUNDLE_JSON: &str = "covariance.json";
pub const BUNDLE_BIN: &str = "covariance.bin";
pub const BUNDLE_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    schema_version: u32,
    s_points: Vec<f64>,
    t_points: Vec<f64>,
    s_raw: Vec<f64>,
    t_raw: Vec<f64>,
    r: usize,
    l: usize,
    j: usize,
    k: usize,
    degree: usize,
    tau: Vec<f64>,
    phi2: f64,
    fve_achieved: f64,
    /// Order of the little-endian f64 blocks in the binary file.
    layout: Vec<String>,
}

fn push_matrix(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let need = rows * cols * 8;
        if self.pos + need > self.bytes.len() {
            return Err(FmmError::Validation("covariance bundle binary is truncated".into()));
        }
        let out = DMatrix::from_iterator(
            rows,
            cols,
            self.bytes[self.pos..self.pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))),
        );
        self.pos += need;
        Ok(out)
    }
}

/// Writes the model as `covariance.json` plus `covariance.bin`
/// (column-major little-endian f64: psi, C_W, each M_j, sigma2).
pub fn write_bundle(model: &CovarianceModel, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| FmmError::io(dir, e))?;
    let g = &model.grid;
    let j = model.n_components();
    let header = BundleHeader {
        schema_version: BUNDLE_SCHEMA,
        s_points: g.s_points().to_vec(),
        t_points: g.t_points().to_vec(),
        s_raw: g.s_raw().to_vec(),
        t_raw: g.t_raw().to_vec(),
        r: g.r_len(),
        l: g.l_len(),
        j,
        k: model.scores.basis_spec.num_basis,
        degree: model.scores.basis_spec.degree,
        tau: model.eigen.tau.iter().copied().collect(),
        phi2: model.eigen.phi2,
        fve_achieved: model.eigen.fve_achieved,
        layout: ["psi (r x j)", "c_w_smoothed (r x r)", "m_j (k x k) for each j", "sigma2 (r x l)"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let mut buf = Vec::new();
    push_matrix(&mut buf, &model.eigen.psi);
    push_matrix(&mut buf, &model.eigen.c_w_smoothed);
    for m in &model.scores.m {
        push_matrix(&mut buf, m);
    }
    push_matrix(&mut buf, &model.sigma2_smoothed);
    let json_path = dir.join(BUNDLE_JSON);
    fs::write(&json_path, serde_json::to_string_pretty(&header)?)
        .map_err(|e| FmmError::io(&json_path, e))?;
    let bin_path = dir.join(BUNDLE_BIN);
    fs::write(&bin_path, buf).map_err(|e| FmmError::io(&bin_path, e))?;
    Ok(())
}

/// Reads a bundle written by [`write_bundle`]. Subject-level score
/// coefficients are not stored.
pub fn read_bundle(dir: impl AsRef<Path>) -> Result<CovarianceModel> {
    let dir = dir.as_ref();
    let missing: Vec<String> = [BUNDLE_JSON, BUNDLE_BIN]
        .iter()
        .filter(|f| !dir.join(f).exists())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(FmmError::MissingArtifacts {
            dir: dir.to_path_buf(),
            missing,
        });
    }
    let json_path = dir.join(BUNDLE_JSON);
    let text = fs::read_to_string(&json_path).map_err(|e| FmmError::io(&json_path, e))?;
    let h: BundleHeader = serde_json::from_str(&text)?;
    if h.schema_version != BUNDLE_SCHEMA {
        return Err(FmmError::Validation(format!(
            "covariance bundle schema {} is not supported",
            h.schema_version
        )));
    }
    let bin_path = dir.join(BUNDLE_BIN);
    let bytes = fs::read(&bin_path).map_err(|e| FmmError::io(&bin_path, e))?;
    let mut rd = Reader { bytes: &bytes, pos: 0 };
    let psi = rd.matrix(h.r, h.j)?;
    let c_w = rd.matrix(h.r, h.r)?;
    let m = (0..h.j)
        .map(|_| rd.matrix(h.k, h.k))
        .collect::<Result<Vec<_>>>()?;
    let sigma2 = rd.matrix(h.r, h.l)?;
    if h.s_raw.len() != h.r || h.t_raw.len() != h.l {
        return Err(FmmError::Validation("covariance bundle grid has inconsistent lengths".into()));
    }
    let grid = SamplingGrid::from_parts(h.s_points, h.t_points, h.s_raw, h.t_raw)?;
    let eigen = MarginalEigensystem {
        psi,
        tau: DVector::from_vec(h.tau),
        fve_achieved: h.fve_achieved,
        phi2: h.phi2,
        c_w_smoothed: c_w,
    };
    let scores = ScoreCovariance {
        basis_spec: SplineBasisSpec::new(h.k, h.degree)?,
        coeffs: Vec::new(),
        m,
    };
    CovarianceModel::new(grid, eigen, scores, sigma2)
}
