//! Variance of the smoothed coefficient surfaces, pointwise and simultaneous
//! confidence bands, and significance maps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{decompose, eval_sigma, CovarianceConfig, CovarianceModel, ResidualTensor};
use crate::error::{FmmError, Result};
use crate::fixed::{resmooth, SmoothedFit};
use crate::grid::{Cell, FunctionalDataset, SamplingGrid};
use crate::linalg::{psd_factor, quantile};
use crate::pointwise::{fit_pointwise, PointwiseFit};
use crate::rng::{rng_for, std_normal, STREAM_DRAWS, STREAM_RESAMPLE};
use crate::smooth::{bspline_basis, trim_nonnegative, SmootherConfig, SurfaceSmoother};

/// Largest `R * L` evaluated on the general (non-fast) variance path without
/// an explicit override.
pub const DENSE_GUARD: usize = 4096;
/// Band multiplier of the pointwise bands.
pub const PCB_MULTIPLIER: f64 = 2.0;
const RESAMPLE_ATTEMPTS: u64 = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    /// Fast path when eligible, otherwise the factorized general path.
    #[default]
    Auto,
    Fast,
    Factorized,
    /// Brute-force double sum over all cell pairs.
    Dense,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarianceOptions {
    pub method: VarianceMethod,
    pub force_dense: bool,
}

pub(crate) fn guard(cells: usize, opts: &VarianceOptions) -> Result<()> {
    if cells > DENSE_GUARD && !opts.force_dense {
        return Err(FmmError::DenseGuard {
            cells,
            guard: DENSE_GUARD,
        });
    }
    Ok(())
}

/// `Var{beta_p(s_r, t_l)}` on every cell, trimmed nonnegative.
pub fn variance_field(
    fit: &PointwiseFit,
    ds: &FunctionalDataset,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    p: usize,
    opts: &VarianceOptions,
) -> Result<DMatrix<f64>> {
    let cells = ds.grid().n_cells();
    match opts.method {
        VarianceMethod::Auto if fit.invariant_fast_path => variance_fast(fit, cov, sm, p),
        VarianceMethod::Fast => variance_fast(fit, cov, sm, p),
        VarianceMethod::Auto | VarianceMethod::Factorized => {
            guard(cells, opts)?;
            Ok(variance_factorized(fit, ds, cov, sm, p))
        }
        VarianceMethod::Dense => {
            guard(cells, opts)?;
            Ok(variance_dense(fit, ds, cov, sm, p))
        }
    }
}

/// `sum_j g_j(r,l)^T M_j g_j(r,l)` where `g_{j,k} = smoother(Z_{j,k})` and
/// `Z_{j,k}(r,l) = h(r,l) psi_j(r) B_k(t_l)`.
fn random_part(cov: &CovarianceModel, sm: &SurfaceSmoother, h: &DMatrix<f64>) -> DMatrix<f64> {
    let psi = &cov.eigen.psi;
    let basis = cov.basis_t();
    let (r_len, l_len) = h.shape();
    let k_len = basis.ncols();
    let mut out = DMatrix::zeros(r_len, l_len);
    for (j, m) in cov.scores.m.iter().enumerate() {
        let g: Vec<DMatrix<f64>> = (0..k_len)
            .map(|k| {
                let z = DMatrix::from_fn(r_len, l_len, |r, l| h[(r, l)] * psi[(r, j)] * basis[(l, k)]);
                sm.apply(&z)
            })
            .collect();
        let mut v = DVector::zeros(k_len);
        for l in 0..l_len {
            for r in 0..r_len {
                for k in 0..k_len {
                    v[k] = g[k][(r, l)];
                }
                out[(r, l)] += v.dot(&(m * &v));
            }
        }
    }
    out
}

/// Time-invariant covariates with no missing data: one design for all cells,
/// so `Var = c_p [sum_j psi~_j(r)^2 b~(l)^T M_j b~(l) + ((S2 o S2) sigma2
/// (S1 o S1)^T)(r,l)]` with `c_p = [(X^T X)^{-1}]_pp`.
pub fn variance_fast(
    fit: &PointwiseFit,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    p: usize,
) -> Result<DMatrix<f64>> {
    let c_p = fit.shared_variance_factor(p).ok_or_else(|| {
        FmmError::Config(
            "fast variance path needs time-invariant covariates and complete data".into(),
        )
    })?;
    let noise = sm.propagate_independent(&cov.sigma2_smoothed);
    let random = match sm {
        SurfaceSmoother::Sandwich(sw) => {
            let psi_t = &sw.s2 * &cov.eigen.psi;
            let b_t = &sw.s1 * cov.basis_t();
            let (r_len, l_len) = (psi_t.nrows(), b_t.nrows());
            let mut out = DMatrix::zeros(r_len, l_len);
            for (j, m) in cov.scores.m.iter().enumerate() {
                let quad: Vec<f64> = (0..l_len)
                    .map(|l| {
                        let b = b_t.row(l).transpose();
                        b.dot(&(m * &b))
                    })
                    .collect();
                for l in 0..l_len {
                    for r in 0..r_len {
                        out[(r, l)] += psi_t[(r, j)].powi(2) * quad[l];
                    }
                }
            }
            out
        }
        SurfaceSmoother::TensorProduct(_) => {
            let (r_len, l_len) = sm.dims();
            random_part(cov, sm, &DMatrix::from_element(r_len, l_len, 1.0))
        }
    };
    Ok(trim_nonnegative(&((random + noise) * c_p)))
}

/// Hat-matrix entries `h_{c,i}` of coefficient `p`, one `R x L` surface per
/// subject (zero where the subject is unobserved).
pub(crate) fn hat_surfaces(fit: &PointwiseFit, ds: &FunctionalDataset, p: usize) -> Vec<DMatrix<f64>> {
    let grid = ds.grid();
    let (r_len, l_len) = (grid.r_len(), grid.l_len());
    let rows: Vec<DVector<f64>> = (0..l_len)
        .flat_map(|l| (0..r_len).map(move |r| Cell::new(r, l)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&c| fit.hat_row_full(ds, p, c))
        .collect();
    (0..ds.n_subjects())
        .map(|i| DMatrix::from_fn(r_len, l_len, |r, l| rows[l * r_len + r][i]))
        .collect()
}

/// Exact general-path variance without forming cell-pair sums:
/// `sum_i sum_j g_{j,i}^T M_j g_{j,i} + sum_c W(c)^2 sigma2(c) |h_c|^2`.
pub fn variance_factorized(
    fit: &PointwiseFit,
    ds: &FunctionalDataset,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    p: usize,
) -> DMatrix<f64> {
    let hats = hat_surfaces(fit, ds, p);
    let parts: Vec<DMatrix<f64>> = hats.par_iter().map(|h| random_part(cov, sm, h)).collect();
    let (r_len, l_len) = sm.dims();
    let mut random = DMatrix::zeros(r_len, l_len);
    for part in &parts {
        random += part;
    }
    let mut hnorm = DMatrix::zeros(r_len, l_len);
    for h in &hats {
        hnorm += h.component_mul(h);
    }
    let noise = sm.propagate_independent(&cov.sigma2_smoothed.component_mul(&hnorm));
    trim_nonnegative(&(random + noise))
}

/// Full `RL x RL` covariance `W Sigma W^T` of the smoothed surface (cells in
/// column-major order), with `Sigma[c, c'] = sigma(c; c') <h_c, h_c'>`.
pub fn dense_covariance(
    fit: &PointwiseFit,
    ds: &FunctionalDataset,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    p: usize,
) -> DMatrix<f64> {
    let grid = ds.grid();
    let (r_len, l_len) = (grid.r_len(), grid.l_len());
    let n = r_len * l_len;
    let cells: Vec<Cell> = (0..l_len)
        .flat_map(|l| (0..r_len).map(move |r| Cell::new(r, l)))
        .collect();
    let hats: Vec<DVector<f64>> = cells.iter().map(|&c| fit.hat_row_full(ds, p, c)).collect();
    let sigma = DMatrix::from_fn(n, n, |a, b| {
        eval_sigma(cov, cells[a], cells[b]) * hats[a].dot(&hats[b])
    });
    let w = DMatrix::from_fn(n, n, |a, b| {
        let c = cells[a];
        sm.cell_weights(c.r, c.l).as_slice()[b]
    });
    &w * sigma * w.transpose()
}

/// Brute force `diag(W Sigma W^T)` over all `(RL)^2` cell pairs.
pub fn variance_dense(
    fit: &PointwiseFit,
    ds: &FunctionalDataset,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    p: usize,
) -> DMatrix<f64> {
    let (r_len, l_len) = sm.dims();
    let full = dense_covariance(fit, ds, cov, sm, p);
    trim_nonnegative(&DMatrix::from_fn(r_len, l_len, |r, l| full[(l * r_len + r, l * r_len + r)]))
}

/// `beta +- 2 sqrt(var)`.
pub fn pointwise_bands(beta: &DMatrix<f64>, var: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    bands(beta, var, PCB_MULTIPLIER)
}

pub fn bands(beta: &DMatrix<f64>, var: &DMatrix<f64>, q: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let half = var.map(|v| q * v.max(0.0).sqrt());
    (beta - &half, beta + &half)
}

/// `beta * 1{lower > 0 or upper < 0}`.
pub fn significance_map(beta: &DMatrix<f64>, lower: &DMatrix<f64>, upper: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(beta.nrows(), beta.ncols(), |r, l| {
        if lower[(r, l)] > 0.0 || upper[(r, l)] < 0.0 {
            beta[(r, l)]
        } else {
            0.0
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b: usize,
    pub m: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Re-run GCV inside every replicate instead of reusing the main fit's
    /// smoothing parameters.
    pub regcv: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            b: 100,
            m: 1000,
            alpha: 0.05,
            seed: 1,
            regcv: false,
        }
    }
}

impl BootstrapConfig {
    pub fn check(&self) -> Result<Vec<String>> {
        if self.b < 2 || self.m < 1 {
            return Err(FmmError::Config(format!(
                "bootstrap needs B >= 2 and M >= 1 (got B = {}, M = {})",
                self.b, self.m
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(FmmError::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        let mut warnings = Vec::new();
        if self.b < 20 {
            warnings.push(format!("bootstrap B = {} is below 20", self.b));
        }
        Ok(warnings)
    }
}

/// Gaussian process fitted to the bootstrap surfaces of one coefficient:
/// surface `m` is `mean + psi (u_m B^T)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub mean: DMatrix<f64>,
    /// `R x J` eigenfunctions of the bootstrap surfaces.
    pub psi: DMatrix<f64>,
    /// `L x K` score basis.
    pub basis: DMatrix<f64>,
    /// Per draw, `J x K` coefficient matrix (row `j` is `u_{m,j}`).
    pub u: Vec<DMatrix<f64>>,
}

impl BootstrapDraws {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn n_components(&self) -> usize {
        self.psi.ncols()
    }

    pub fn surface(&self, m: usize) -> DMatrix<f64> {
        if self.psi.ncols() == 0 {
            return self.mean.clone();
        }
        &self.mean + &self.psi * (&self.u[m] * self.basis.transpose())
    }
}

/// Resamples subjects and refits the pointwise and smoothing steps;
/// `result[b][p]` is replicate `b`'s surface for coefficient `p`.
pub fn bootstrap_surfaces(
    ds: &FunctionalDataset,
    smoothed: &SmoothedFit,
    smoother_config: &SmootherConfig,
    cfg: &BootstrapConfig,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    let n = ds.n_subjects();
    let reps: Vec<Result<Vec<DMatrix<f64>>>> = (0..cfg.b as u64)
        .into_par_iter()
        .map(|b| {
            let mut last_err = None;
            for attempt in 0..RESAMPLE_ATTEMPTS {
                let mut rng = rng_for(cfg.seed, STREAM_RESAMPLE, (attempt << 32) | b);
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let sub = ds.select_subjects(&idx);
                match fit_pointwise(&sub) {
                    Ok(fit) => {
                        if !cfg.regcv {
                            return Ok(resmooth(&fit, &smoothed.smoothers));
                        }
                        return fit
                            .beta_raw
                            .iter()
                            .map(|raw| {
                                SurfaceSmoother::fit(raw, ds.grid(), n, smoother_config)
                                    .map(|(sm, _)| sm.apply(raw))
                            })
                            .collect();
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            Err(last_err.expect("at least one attempt"))
        })
        .collect();
    reps.into_iter().collect()
}

/// Marginal decomposition of one coefficient's bootstrap surfaces and `M`
/// Gaussian draws of the score coefficients.
pub fn bootstrap_draws(
    surfaces: &[DMatrix<f64>],
    grid: &SamplingGrid,
    cov_config: &CovarianceConfig,
    m: usize,
    seed: u64,
    p: usize,
) -> Result<(BootstrapDraws, Vec<String>)> {
    let b = surfaces.len();
    let (r_len, l_len) = surfaces[0].shape();
    let mut mean = DMatrix::zeros(r_len, l_len);
    for s in surfaces {
        mean += s;
    }
    mean /= b as f64;
    let centered: Vec<DMatrix<f64>> = surfaces.iter().map(|s| s - &mean).collect();
    let spread = centered.iter().fold(0.0_f64, |a, c| a.max(c.amax()));
    let empty = |warnings| {
        Ok((
            BootstrapDraws {
                mean: mean.clone(),
                psi: DMatrix::zeros(r_len, 0),
                basis: DMatrix::zeros(l_len, 0),
                u: vec![DMatrix::zeros(0, 0); m],
            },
            warnings,
        ))
    };
    if spread <= 1e-12 * (1.0 + mean.amax()) {
        return empty(Vec::new());
    }
    let res = ResidualTensor::complete(centered);
    let (eigen, scores, warnings) = match decompose(&res, grid, cov_config) {
        Ok(v) => v,
        Err(FmmError::Degenerate(msg)) => {
            return empty(vec![format!("coefficient {p}: bootstrap surfaces degenerate ({msg})")])
        }
        Err(e) => return Err(e),
    };
    let basis = bspline_basis(&scores.basis_spec, grid.t_points())?;
    let j_len = eigen.n_components();
    let k_len = scores.basis_spec.num_basis;
    let factors: Vec<DMatrix<f64>> = (0..j_len)
        .map(|j| {
            let coefs: Vec<DVector<f64>> = scores.coeffs.iter().map(|c| c.row(j).transpose()).collect();
            let mut avg = DVector::zeros(k_len);
            for c in &coefs {
                avg += c;
            }
            avg /= b as f64;
            let mut v = DMatrix::zeros(k_len, k_len);
            for c in &coefs {
                let d = c - &avg;
                v += &d * d.transpose();
            }
            psd_factor(&(v / (b - 1) as f64))
        })
        .collect();
    let u: Vec<DMatrix<f64>> = (0..m as u64)
        .into_par_iter()
        .map(|idx| {
            let mut rng = rng_for(seed, STREAM_DRAWS, ((p as u64) << 32) | idx);
            let mut u = DMatrix::zeros(j_len, k_len);
            for (j, f) in factors.iter().enumerate() {
                let z = DVector::from_fn(k_len, |_, _| std_normal(&mut rng));
                u.row_mut(j).copy_from(&(f * z).transpose());
            }
            u
        })
        .collect();
    Ok((
        BootstrapDraws {
            mean,
            psi: eigen.psi,
            basis,
            u,
        },
        warnings
            .into_iter()
            .map(|w| format!("coefficient {p} bootstrap: {w}"))
            .collect(),
    ))
}

/// Maximum standardized deviation of each draw from the estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxStatistic {
    pub q_star: Vec<f64>,
    /// Cells with zero variance but a nonzero deviation, left out of the max.
    pub excluded_cells: usize,
}

fn is_zero_deviation(dev: f64, scale: f64) -> bool {
    dev.abs() <= 1e-12 * (1.0 + scale)
}

/// `q*_m = max_c |draw_m(c) - estimate(c)| / sqrt(var(c))` for any shape.
pub fn max_statistic(
    draws: impl Fn(usize) -> DMatrix<f64> + Sync,
    n_draws: usize,
    estimate: &DMatrix<f64>,
    var: &DMatrix<f64>,
) -> MaxStatistic {
    let scale = estimate.amax();
    let per_draw: Vec<(f64, Vec<usize>)> = (0..n_draws)
        .into_par_iter()
        .map(|m| {
            let d = draws(m);
            let mut best = 0.0_f64;
            let mut excluded = Vec::new();
            for (idx, ((&x, &e), &v)) in d.iter().zip(estimate.iter()).zip(var.iter()).enumerate() {
                let dev = x - e;
                if v > 0.0 {
                    best = best.max(dev.abs() / v.sqrt());
                } else if !is_zero_deviation(dev, scale) {
                    excluded.push(idx);
                }
            }
            (best, excluded)
        })
        .collect();
    let mut excluded: Vec<usize> = per_draw.iter().flat_map(|(_, e)| e.iter().copied()).collect();
    excluded.sort_unstable();
    excluded.dedup();
    MaxStatistic {
        q_star: per_draw.into_iter().map(|(q, _)| q).collect(),
        excluded_cells: excluded.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScbResult {
    pub q: f64,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub stat: MaxStatistic,
}

/// Simultaneous band `beta +- q sqrt(var)` with `q` the `(1 - alpha)`
/// quantile of the max statistic.
pub fn scb_from_draws(draws: &BootstrapDraws, beta: &DMatrix<f64>, var: &DMatrix<f64>, alpha: f64) -> ScbResult {
    let stat = max_statistic(|m| draws.surface(m), draws.len(), beta, var);
    let q = quantile(&stat.q_star, 1.0 - alpha);
    let (lower, upper) = bands(beta, var, q);
    ScbResult { q, lower, upper, stat }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientInference {
    pub beta_hat: DMatrix<f64>,
    pub var_hat: DMatrix<f64>,
    pub pcb_lower: DMatrix<f64>,
    pub pcb_upper: DMatrix<f64>,
    pub scb_lower: DMatrix<f64>,
    pub scb_upper: DMatrix<f64>,
    pub scb_quantile: f64,
    /// Significance map from the simultaneous band.
    pub sig_map: DMatrix<f64>,
    pub sig_map_pcb: DMatrix<f64>,
    pub excluded_cells: usize,
    pub bootstrap_components: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub coefficients: Vec<CoefficientInference>,
    pub alpha: f64,
    pub draws: Vec<BootstrapDraws>,
    pub warnings: Vec<String>,
}

/// Variance fields, pointwise bands, bootstrap simultaneous bands and
/// significance maps for every coefficient.
#[allow(clippy::too_many_arguments)]
pub fn infer(
    ds: &FunctionalDataset,
    fit: &PointwiseFit,
    smoothed: &SmoothedFit,
    cov: &CovarianceModel,
    smoother_config: &SmootherConfig,
    cov_config: &CovarianceConfig,
    boot: &BootstrapConfig,
    var_opts: &VarianceOptions,
) -> Result<InferenceResult> {
    let mut warnings = boot.check()?;
    let vars = smoothed
        .smoothers
        .iter()
        .enumerate()
        .map(|(p, sm)| variance_field(fit, ds, cov, sm, p, var_opts))
        .collect::<Result<Vec<_>>>()?;
    let surfaces = bootstrap_surfaces(ds, smoothed, smoother_config, boot)?;
    let mut coefficients = Vec::new();
    let mut all_draws = Vec::new();
    for (p, var) in vars.into_iter().enumerate() {
        let per_p: Vec<DMatrix<f64>> = surfaces.iter().map(|s| s[p].clone()).collect();
        let (draws, w) = bootstrap_draws(&per_p, ds.grid(), cov_config, boot.m, boot.seed, p)?;
        warnings.extend(w);
        let beta = &smoothed.beta_hat[p];
        let (pcb_lower, pcb_upper) = pointwise_bands(beta, &var);
        let scb = scb_from_draws(&draws, beta, &var, boot.alpha);
        if scb.stat.excluded_cells > 0 {
            warnings.push(format!(
                "coefficient {p}: {} zero-variance cells with nonzero bootstrap deviation excluded from the max statistic",
                scb.stat.excluded_cells
            ));
        }
        coefficients.push(CoefficientInference {
            sig_map: significance_map(beta, &scb.lower, &scb.upper),
            sig_map_pcb: significance_map(beta, &pcb_lower, &pcb_upper),
            beta_hat: beta.clone(),
            var_hat: var,
            pcb_lower,
            pcb_upper,
            scb_lower: scb.lower,
            scb_upper: scb.upper,
            scb_quantile: scb.q,
            excluded_cells: scb.stat.excluded_cells,
            bootstrap_components: draws.n_components(),
        });
        all_draws.push(draws);
    }
    Ok(InferenceResult {
        coefficients,
        alpha: boot.alpha,
        draws: all_draws,
        warnings,
    })
}
