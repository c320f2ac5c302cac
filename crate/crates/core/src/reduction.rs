//! Univariate effects: coefficient surfaces averaged over one axis, with
//! their variance and pointwise/simultaneous bands.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceModel;
use crate::error::{FmmError, Result};
use crate::grid::{FunctionalDataset, SamplingGrid};
use crate::inference::{
    dense_covariance, guard, hat_surfaces, max_statistic, BootstrapDraws, VarianceMethod,
    VarianceOptions, PCB_MULTIPLIER,
};
use crate::linalg::quantile;
use crate::pipeline::ModelFit;
use crate::pointwise::PointwiseFit;
use crate::smooth::SurfaceSmoother;

/// The axis kept after reduction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Keep `s`, average over `t`.
    S,
    /// Keep `t`, average over `s`.
    T,
}

impl std::str::FromStr for Axis {
    type Err = FmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s" => Ok(Axis::S),
            "t" => Ok(Axis::T),
            other => Err(FmmError::Config(format!("unknown axis '{other}' (expected s or t)"))),
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::S => "s",
            Axis::T => "t",
        })
    }
}

/// Averaging weights over the collapsed axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionWeights {
    /// Plain arithmetic mean.
    #[default]
    Unweighted,
    /// Quadrature weights of the collapsed axis.
    Quadrature,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionConfig {
    pub weights: ReductionWeights,
    pub variance: VarianceOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnivariateEffect {
    pub axis: Axis,
    /// Retained-axis coordinates in the input units.
    pub axis_values: Vec<f64>,
    pub estimate: DVector<f64>,
    pub variance: DVector<f64>,
    pub pcb_lower: DVector<f64>,
    pub pcb_upper: DVector<f64>,
    pub scb_lower: DVector<f64>,
    pub scb_upper: DVector<f64>,
    pub scb_quantile: f64,
    pub excluded_cells: usize,
}

/// Weights over the collapsed axis; they sum to one.
pub fn collapse_weights(grid: &SamplingGrid, axis: Axis, weights: ReductionWeights) -> Vec<f64> {
    let (len, quad) = match axis {
        Axis::T => (grid.r_len(), grid.s_weights()),
        Axis::S => (grid.l_len(), grid.t_weights()),
    };
    match weights {
        ReductionWeights::Unweighted => vec![1.0 / len as f64; len],
        ReductionWeights::Quadrature => {
            let total: f64 = quad.iter().sum();
            quad.iter().map(|w| w / total).collect()
        }
    }
}

/// Weighted average of an `R x L` surface over the collapsed axis.
pub fn reduce_surface(surface: &DMatrix<f64>, axis: Axis, w: &[f64]) -> DVector<f64> {
    let wv = DVector::from_column_slice(w);
    match axis {
        Axis::T => surface.transpose() * wv,
        Axis::S => surface * wv,
    }
}

/// `out(k) = sum_c omega_k(c)^2 v(c)` where `omega_k` is the smoother weight
/// surface of the reduced estimator at retained index `k`.
fn reduced_noise(sm: &SurfaceSmoother, v: &DMatrix<f64>, axis: Axis, w: &[f64]) -> DVector<f64> {
    let wv = DVector::from_column_slice(w);
    match sm {
        SurfaceSmoother::Sandwich(sw) => match axis {
            Axis::T => {
                let bar = (sw.s2.transpose() * wv).map(|x| x * x);
                sw.s1.map(|x| x * x) * (v.transpose() * bar)
            }
            Axis::S => {
                let bar = (sw.s1.transpose() * wv).map(|x| x * x);
                sw.s2.map(|x| x * x) * (v * bar)
            }
        },
        SurfaceSmoother::TensorProduct(_) => {
            let (r_len, l_len) = sm.dims();
            let out_len = match axis {
                Axis::T => l_len,
                Axis::S => r_len,
            };
            DVector::from_iterator(
                out_len,
                (0..out_len).map(|k| {
                    let mut omega = DMatrix::zeros(r_len, l_len);
                    for (a, &wa) in w.iter().enumerate() {
                        let (r, l) = match axis {
                            Axis::T => (a, k),
                            Axis::S => (k, a),
                        };
                        omega += sm.cell_weights(r, l) * wa;
                    }
                    omega.component_mul(&omega).component_mul(v).sum()
                }),
            )
        }
    }
}

/// `sum_j gbar_j^T M_j gbar_j` with `gbar_{j,k}` the reduced smooth of
/// `h o psi_j (x) B_k`.
fn reduced_random(cov: &CovarianceModel, sm: &SurfaceSmoother, h: &DMatrix<f64>, axis: Axis, w: &[f64]) -> DVector<f64> {
    let psi = &cov.eigen.psi;
    let basis = cov.basis_t();
    let (r_len, l_len) = h.shape();
    let k_len = basis.ncols();
    let out_len = match axis {
        Axis::T => l_len,
        Axis::S => r_len,
    };
    let mut out = DVector::zeros(out_len);
    for (j, m) in cov.scores.m.iter().enumerate() {
        let mut g = DMatrix::zeros(k_len, out_len);
        for k in 0..k_len {
            let z = DMatrix::from_fn(r_len, l_len, |r, l| h[(r, l)] * psi[(r, j)] * basis[(l, k)]);
            g.set_row(k, &reduce_surface(&sm.apply(&z), axis, w).transpose());
        }
        for idx in 0..out_len {
            let v = g.column(idx);
            out[idx] += v.dot(&(m * v));
        }
    }
    out
}

/// Closed form for time-invariant covariates and complete data.
fn reduced_variance_fast(
    fit: &PointwiseFit,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    p: usize,
    axis: Axis,
    w: &[f64],
) -> Result<DVector<f64>> {
    let c_p = fit.shared_variance_factor(p).ok_or_else(|| {
        FmmError::Config("fast variance path needs time-invariant covariates and complete data".into())
    })?;
    let noise = reduced_noise(sm, &cov.sigma2_smoothed, axis, w);
    let random = match sm {
        SurfaceSmoother::Sandwich(sw) => {
            let psi_t = &sw.s2 * &cov.eigen.psi;
            let b_t = &sw.s1 * cov.basis_t();
            let wv = DVector::from_column_slice(w);
            let mut out = DVector::zeros(noise.len());
            for (j, m) in cov.scores.m.iter().enumerate() {
                match axis {
                    Axis::T => {
                        let psi_bar = psi_t.column(j).dot(&wv);
                        for l in 0..b_t.nrows() {
                            let b = b_t.row(l).transpose();
                            out[l] += psi_bar * psi_bar * b.dot(&(m * &b));
                        }
                    }
                    Axis::S => {
                        let b_bar = b_t.transpose() * &wv;
                        let quad = b_bar.dot(&(m * &b_bar));
                        for r in 0..psi_t.nrows() {
                            out[r] += psi_t[(r, j)].powi(2) * quad;
                        }
                    }
                }
            }
            out
        }
        SurfaceSmoother::TensorProduct(_) => {
            let (r_len, l_len) = sm.dims();
            reduced_random(cov, sm, &DMatrix::from_element(r_len, l_len, 1.0), axis, w)
        }
    };
    Ok(((random + noise) * c_p).map(|x| x.max(0.0)))
}

fn reduced_variance_factorized(
    fit: &PointwiseFit,
    ds: &FunctionalDataset,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    p: usize,
    axis: Axis,
    w: &[f64],
) -> DVector<f64> {
    let hats = hat_surfaces(fit, ds, p);
    let parts: Vec<DVector<f64>> = hats.par_iter().map(|h| reduced_random(cov, sm, h, axis, w)).collect();
    let (r_len, l_len) = sm.dims();
    let mut hnorm = DMatrix::zeros(r_len, l_len);
    for h in &hats {
        hnorm += h.component_mul(h);
    }
    let mut out = reduced_noise(sm, &cov.sigma2_smoothed.component_mul(&hnorm), axis, w);
    for part in &parts {
        out += part;
    }
    out.map(|x| x.max(0.0))
}

/// Brute-force double sum `sum_a sum_b w_a w_b Cov{beta(a, k), beta(b, k)}`.
pub fn reduced_variance_dense(
    fit: &PointwiseFit,
    ds: &FunctionalDataset,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    p: usize,
    axis: Axis,
    w: &[f64],
) -> DVector<f64> {
    let (r_len, l_len) = sm.dims();
    let full = dense_covariance(fit, ds, cov, sm, p);
    let idx = |a: usize, k: usize| match axis {
        Axis::T => k * r_len + a,
        Axis::S => a * r_len + k,
    };
    let out_len = match axis {
        Axis::T => l_len,
        Axis::S => r_len,
    };
    DVector::from_iterator(
        out_len,
        (0..out_len).map(|k| {
            let mut acc = 0.0;
            for (a, &wa) in w.iter().enumerate() {
                for (b, &wb) in w.iter().enumerate() {
                    acc += wa * wb * full[(idx(a, k), idx(b, k))];
                }
            }
            acc.max(0.0)
        }),
    )
}

/// Variance of the reduced estimator along the retained axis.
#[allow(clippy::too_many_arguments)]
pub fn reduced_variance(
    fit: &PointwiseFit,
    ds: &FunctionalDataset,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    p: usize,
    axis: Axis,
    w: &[f64],
    opts: &VarianceOptions,
) -> Result<DVector<f64>> {
    let cells = ds.grid().n_cells();
    match opts.method {
        VarianceMethod::Auto if fit.invariant_fast_path => reduced_variance_fast(fit, cov, sm, p, axis, w),
        VarianceMethod::Fast => reduced_variance_fast(fit, cov, sm, p, axis, w),
        VarianceMethod::Auto | VarianceMethod::Factorized => {
            guard(cells, opts)?;
            Ok(reduced_variance_factorized(fit, ds, cov, sm, p, axis, w))
        }
        VarianceMethod::Dense => {
            guard(cells, opts)?;
            Ok(reduced_variance_dense(fit, ds, cov, sm, p, axis, w))
        }
    }
}

/// Reduced estimate, variance and bands; the simultaneous band reuses the
/// bivariate bootstrap draws, reduced and maximized over the retained axis.
#[allow(clippy::too_many_arguments)]
pub fn reduce_with(
    ds: &FunctionalDataset,
    fit: &PointwiseFit,
    cov: &CovarianceModel,
    sm: &SurfaceSmoother,
    beta: &DMatrix<f64>,
    draws: &BootstrapDraws,
    alpha: f64,
    p: usize,
    axis: Axis,
    cfg: &ReductionConfig,
) -> Result<UnivariateEffect> {
    let grid = ds.grid();
    let w = collapse_weights(grid, axis, cfg.weights);
    let estimate = reduce_surface(beta, axis, &w);
    let variance = reduced_variance(fit, ds, cov, sm, p, axis, &w, &cfg.variance)?;
    let n = estimate.len();
    let as_col = |v: &DVector<f64>| DMatrix::from_column_slice(n, 1, v.as_slice());
    let est_m = as_col(&estimate);
    let var_m = as_col(&variance);
    let stat = max_statistic(
        |m| as_col(&reduce_surface(&draws.surface(m), axis, &w)),
        draws.len(),
        &est_m,
        &var_m,
    );
    let q = quantile(&stat.q_star, 1.0 - alpha);
    let sd = variance.map(|v| v.sqrt());
    let axis_values = match axis {
        Axis::T => grid.t_raw().to_vec(),
        Axis::S => grid.s_raw().to_vec(),
    };
    Ok(UnivariateEffect {
        axis,
        axis_values,
        pcb_lower: &estimate - &sd * PCB_MULTIPLIER,
        pcb_upper: &estimate + &sd * PCB_MULTIPLIER,
        scb_lower: &estimate - &sd * q,
        scb_upper: &estimate + &sd * q,
        estimate,
        variance,
        scb_quantile: q,
        excluded_cells: stat.excluded_cells,
    })
}

/// [`reduce_with`] on the pieces of a full model fit.
pub fn reduce_effect(
    ds: &FunctionalDataset,
    model: &ModelFit,
    p: usize,
    axis: Axis,
    cfg: &ReductionConfig,
) -> Result<UnivariateEffect> {
    let n_coef = model.smoothed.beta_hat.len();
    if p >= n_coef {
        return Err(FmmError::Config(format!("coefficient {p} out of range (model has {n_coef})")));
    }
    reduce_with(
        ds,
        &model.pointwise,
        &model.covariance,
        &model.smoothed.smoothers[p],
        &model.smoothed.beta_hat[p],
        &model.inference.draws[p],
        model.inference.alpha,
        p,
        axis,
        cfg,
    )
}

/// Keeps the `s` points whose input coordinate lies in `[lo, hi]`.
pub fn restrict_subdomain(ds: &FunctionalDataset, lo: f64, hi: f64, renormalize: bool) -> Result<FunctionalDataset> {
    if !(lo <= hi) {
        return Err(FmmError::Config(format!("invalid s range [{lo}, {hi}]")));
    }
    let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
    let rows: Vec<usize> = ds
        .grid()
        .s_raw()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= lo - tol && s <= hi + tol)
        .map(|(r, _)| r)
        .collect();
    if rows.is_empty() {
        return Err(FmmError::Validation(format!("s range [{lo}, {hi}] contains no grid points")));
    }
    ds.select_s_rows(&rows, renormalize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::tests::{identity_smoother, random_instance, smoothers, zero_model};
    use crate::pointwise::fit_pointwise;

    fn intercept_only(n: usize, r_len: usize, l_len: usize) -> FunctionalDataset {
        let grid = SamplingGrid::midpoint(r_len, l_len);
        let y = (0..n)
            .map(|i| DMatrix::from_fn(r_len, l_len, |r, l| (i * 7 + r * 3 + l) as f64 % 5.0))
            .collect();
        FunctionalDataset::complete(grid, y, vec![], (0..n).map(|i| i.to_string()).collect()).unwrap()
    }

    #[test]
    fn constant_in_s_gives_the_t_profile() {
        let surface = DMatrix::from_fn(4, 6, |_, l| (l as f64).sin());
        let w = vec![0.25; 4];
        let est = reduce_surface(&surface, Axis::T, &w);
        for l in 0..6 {
            assert_eq!(est[l], surface[(0, l)]);
        }
    }

    #[test]
    fn linear_in_s_averages_to_one_half() {
        let grid = SamplingGrid::midpoint(7, 5);
        let surface = DMatrix::from_fn(7, 5, |r, _| grid.s_points()[r]);
        let w = collapse_weights(&grid, Axis::T, ReductionWeights::Unweighted);
        let est = reduce_surface(&surface, Axis::T, &w);
        assert!(est.iter().all(|&x| (x - 0.5).abs() < 1e-15));
    }

    #[test]
    fn mean_of_means_variance() {
        let (n, r_len, l_len) = (9, 4, 6);
        let sigma2 = 1.7;
        let ds = intercept_only(n, r_len, l_len);
        let fit = fit_pointwise(&ds).unwrap();
        let cov = zero_model(ds.grid(), sigma2);
        let sm = identity_smoother(r_len, l_len);
        for method in [VarianceMethod::Fast, VarianceMethod::Factorized, VarianceMethod::Dense] {
            let opts = VarianceOptions { method, force_dense: false };
            for (axis, collapsed) in [(Axis::T, r_len), (Axis::S, l_len)] {
                let w = collapse_weights(ds.grid(), axis, ReductionWeights::Unweighted);
                let v = reduced_variance(&fit, &ds, &cov, &sm, 0, axis, &w, &opts).unwrap();
                let expect = sigma2 / (n * collapsed) as f64;
                assert!(v.iter().all(|&x| (x - expect).abs() < 1e-12), "{method:?} {axis}");
            }
        }
    }

    fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).amax() / b.amax()
    }

    #[test]
    fn factorized_matches_double_sum() {
        let (ds, cov) = random_instance(11, 15, 4, 9, false);
        let fit = fit_pointwise(&ds).unwrap();
        for sm in smoothers(ds.grid()) {
            for axis in [Axis::S, Axis::T] {
                let w = collapse_weights(ds.grid(), axis, ReductionWeights::Unweighted);
                for p in 0..2 {
                    let fac = reduced_variance_factorized(&fit, &ds, &cov, &sm, p, axis, &w);
                    let dense = reduced_variance_dense(&fit, &ds, &cov, &sm, p, axis, &w);
                    assert!(rel(&fac, &dense) < 1e-8, "{axis} {p}");
                }
            }
        }
    }

    #[test]
    fn fast_matches_double_sum() {
        let (ds, cov) = random_instance(12, 20, 5, 12, true);
        let fit = fit_pointwise(&ds).unwrap();
        for sm in smoothers(ds.grid()) {
            for axis in [Axis::S, Axis::T] {
                let w = collapse_weights(ds.grid(), axis, ReductionWeights::Quadrature);
                for p in 0..2 {
                    let fast = reduced_variance_fast(&fit, &cov, &sm, p, axis, &w).unwrap();
                    let dense = reduced_variance_dense(&fit, &ds, &cov, &sm, p, axis, &w);
                    assert!(rel(&fast, &dense) < 1e-8, "{axis} {p}");
                }
            }
        }
    }

    #[test]
    fn univariate_bands_bracket_the_estimate() {
        let (ds, cov) = random_instance(13, 20, 5, 12, true);
        let fit = fit_pointwise(&ds).unwrap();
        let sm = &smoothers(ds.grid())[0];
        let beta = sm.apply(&fit.beta_raw[1]);
        let draws = BootstrapDraws {
            mean: beta.clone(),
            psi: DMatrix::from_fn(5, 1, |r, _| 0.2 + r as f64 * 0.1),
            basis: DMatrix::from_fn(12, 1, |l, _| (l as f64 * 0.5).cos()),
            u: (0..200).map(|m| DMatrix::from_element(1, 1, ((m * 37) % 200) as f64 / 100.0 - 1.0)).collect(),
        };
        for axis in [Axis::S, Axis::T] {
            let eff = reduce_with(&ds, &fit, &cov, sm, &beta, &draws, 0.05, 1, axis, &ReductionConfig::default())
                .unwrap();
            assert!(eff.scb_quantile > 0.0);
            for k in 0..eff.estimate.len() {
                assert!(eff.variance[k] >= 0.0);
                assert!(eff.pcb_lower[k] <= eff.estimate[k] && eff.estimate[k] <= eff.pcb_upper[k]);
                assert!(eff.scb_lower[k] <= eff.estimate[k] && eff.estimate[k] <= eff.scb_upper[k]);
            }
        }
    }

    #[test]
    fn subdomain_slicing() {
        let ds = intercept_only(5, 7, 4);
        let all = restrict_subdomain(&ds, 0.0, 1.0, false).unwrap();
        assert_eq!(all.grid(), ds.grid());
        assert_eq!(all.responses(), ds.responses());

        let s = ds.grid().s_points().to_vec();
        let first5 = restrict_subdomain(&ds, s[0], s[4], false).unwrap();
        assert_eq!(first5.grid().r_len(), 5);
        assert_eq!(first5.grid().s_points(), &s[..5]);
        let wsum: f64 = first5.grid().s_weights().iter().sum();
        assert!((wsum - 1.0).abs() < 1e-12);
        assert_eq!(first5.responses()[2][(3, 1)], ds.responses()[2][(3, 1)]);

        let renorm = restrict_subdomain(&ds, s[0], s[4], true).unwrap();
        assert_eq!(renorm.grid().s_points()[0], 0.0);
        assert_eq!(renorm.grid().s_points()[4], 1.0);

        assert!(matches!(restrict_subdomain(&ds, 2.0, 3.0, false), Err(FmmError::Validation(_))));
    }
}
