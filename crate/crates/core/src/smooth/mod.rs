//! Bivariate smoothing of raw coefficient and variance surfaces.

pub mod basis;
pub mod sandwich;
pub mod tensor;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use basis::{bspline_basis, difference_penalty, SplineBasisSpec};
pub use sandwich::{
    build_smoother, select_lambda_gcv, smooth_surface, GcvSelection, SandwichSmoother,
};
pub use tensor::{build_tensor_product_smoother, TensorProductSmoother};

use crate::error::{FmmError, Result};
use crate::grid::SamplingGrid;

pub const DEFAULT_DEGREE: usize = 3;
pub const DEFAULT_DIFF_ORDER: usize = 2;
pub const MAX_KNOTS: usize = 35;

/// Candidate smoothing parameters per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaGrid {
    pub r: Vec<f64>,
    pub l: Vec<f64>,
}

impl LambdaGrid {
    /// `n` log-spaced values on `[lo, hi]` for both axes.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Self {
        let values: Vec<f64> = if n == 1 {
            vec![lo]
        } else {
            let (a, b) = (lo.log10(), hi.log10());
            (0..n)
                .map(|k| 10f64.powf(a + (b - a) * k as f64 / (n - 1) as f64))
                .collect()
        };
        LambdaGrid {
            r: values.clone(),
            l: values,
        }
    }

    pub fn fixed(lambda_r: f64, lambda_l: f64) -> Self {
        LambdaGrid {
            r: vec![lambda_r],
            l: vec![lambda_l],
        }
    }

    pub fn len(&self) -> usize {
        self.r.len() * self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check(&self) -> Result<()> {
        if self.is_empty() {
            return Err(FmmError::Config("lambda grid is empty".into()));
        }
        for &v in self.r.iter().chain(&self.l) {
            sandwich::check_lambda(v)?;
        }
        Ok(())
    }
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::log_spaced(1e-4, 1e4, 10)
    }
}

/// `K_L = min{floor(sqrt(L + L^2/N)), floor(L/2), 35}`.
pub fn default_knots_t(l_len: usize, n_subjects: usize) -> usize {
    let l = l_len as f64;
    let cost_rule = (l + l * l / n_subjects as f64).sqrt().floor() as usize;
    cost_rule.min(l_len / 2).min(MAX_KNOTS)
}

/// `K_R = min{floor(R/2), 35}`.
pub fn default_knots_s(r_len: usize) -> usize {
    (r_len / 2).min(MAX_KNOTS)
}

/// Spline spec for an axis with `len` points: the degree drops to
/// `min(3, len - 2)` on very short axes and `K` is floored at `degree + 1`.
pub fn axis_spec(len: usize, knots: usize) -> SplineBasisSpec {
    let degree = if len < 2 {
        0
    } else if len <= DEFAULT_DEGREE + 2 {
        DEFAULT_DEGREE.min(len - 2)
    } else {
        DEFAULT_DEGREE
    };
    let k = knots.max(degree + 1);
    SplineBasisSpec {
        num_basis: k,
        degree,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmootherBackend {
    #[default]
    Sandwich,
    TensorProduct,
}

impl std::str::FromStr for SmootherBackend {
    type Err = FmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sandwich" => Ok(SmootherBackend::Sandwich),
            "tensor" | "tensor_product" | "tensor-product" => Ok(SmootherBackend::TensorProduct),
            other => Err(FmmError::Config(format!("unknown smoother backend `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmootherConfig {
    pub backend: SmootherBackend,
    pub knots_s: Option<usize>,
    pub knots_t: Option<usize>,
    pub diff_order: (usize, usize),
    pub lambda_grid: LambdaGrid,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        SmootherConfig {
            backend: SmootherBackend::Sandwich,
            knots_s: None,
            knots_t: None,
            diff_order: (DEFAULT_DIFF_ORDER, DEFAULT_DIFF_ORDER),
            lambda_grid: LambdaGrid::default(),
        }
    }
}

impl SmootherConfig {
    /// Basis specs for both axes given the grid and sample size.
    pub fn specs(&self, grid: &SamplingGrid, n_subjects: usize) -> (SplineBasisSpec, SplineBasisSpec) {
        let k_s = self.knots_s.unwrap_or_else(|| default_knots_s(grid.r_len()));
        let k_t = self
            .knots_t
            .unwrap_or_else(|| default_knots_t(grid.l_len(), n_subjects));
        (axis_spec(grid.r_len(), k_s), axis_spec(grid.l_len(), k_t))
    }
}

/// A linear surface smoother from either backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SurfaceSmoother {
    Sandwich(SandwichSmoother),
    TensorProduct(TensorProductSmoother),
}

impl SurfaceSmoother {
    /// GCV-tuned smoother for `raw` on `grid`.
    pub fn fit(
        raw: &DMatrix<f64>,
        grid: &SamplingGrid,
        n_subjects: usize,
        config: &SmootherConfig,
    ) -> Result<(Self, GcvSelection)> {
        let (spec_r, spec_l) = config.specs(grid, n_subjects);
        let (s, t) = (grid.s_points(), grid.t_points());
        match config.backend {
            SmootherBackend::Sandwich => {
                let (sm, sel) = SandwichSmoother::fit_gcv(
                    raw,
                    s,
                    t,
                    spec_r,
                    spec_l,
                    config.diff_order,
                    &config.lambda_grid,
                )?;
                Ok((SurfaceSmoother::Sandwich(sm), sel))
            }
            SmootherBackend::TensorProduct => {
                let (sm, sel) = TensorProductSmoother::fit_gcv(
                    raw,
                    s,
                    t,
                    spec_r,
                    spec_l,
                    config.diff_order,
                    &config.lambda_grid,
                )?;
                Ok((SurfaceSmoother::TensorProduct(sm), sel))
            }
        }
    }

    pub fn apply(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SurfaceSmoother::Sandwich(sm) => smooth_surface(raw, sm),
            SurfaceSmoother::TensorProduct(sm) => sm.apply(raw),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            SurfaceSmoother::Sandwich(sm) => (sm.s2.nrows(), sm.s1.nrows()),
            SurfaceSmoother::TensorProduct(sm) => (sm.a_r.nrows(), sm.a_l.nrows()),
        }
    }

    /// Smoother weights producing output cell `(r, l)`, as an `R x L` surface.
    pub fn cell_weights(&self, r: usize, l: usize) -> DMatrix<f64> {
        match self {
            SurfaceSmoother::Sandwich(sm) => sm.s2.row(r).transpose() * sm.s1.row(l),
            SurfaceSmoother::TensorProduct(sm) => sm.cell_weights(r, l),
        }
    }

    /// `out(r, l) = sum_c W_{rl}(c)^2 v(c)`: propagates independent per-cell
    /// variances through the smoother.
    pub fn propagate_independent(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SurfaceSmoother::Sandwich(sm) => {
                let s2sq = sm.s2.map(|x| x * x);
                let s1sq = sm.s1.map(|x| x * x);
                s2sq * v * s1sq.transpose()
            }
            SurfaceSmoother::TensorProduct(_) => {
                let (r_len, l_len) = self.dims();
                DMatrix::from_fn(r_len, l_len, |r, l| {
                    let w = self.cell_weights(r, l);
                    w.component_mul(&w).component_mul(v).sum()
                })
            }
        }
    }

    pub fn lambda(&self) -> (f64, f64) {
        match self {
            SurfaceSmoother::Sandwich(sm) => sm.lambda,
            SurfaceSmoother::TensorProduct(sm) => sm.lambda,
        }
    }

    /// Effective degrees of freedom of the surface fit.
    pub fn edf(&self) -> f64 {
        match self {
            SurfaceSmoother::Sandwich(sm) => sm.edf.0 * sm.edf.1,
            SurfaceSmoother::TensorProduct(sm) => sm.edf,
        }
    }

    pub fn specs(&self) -> (SplineBasisSpec, SplineBasisSpec) {
        match self {
            SurfaceSmoother::Sandwich(sm) => (sm.spec_r, sm.spec_l),
            SurfaceSmoother::TensorProduct(sm) => (sm.spec_r, sm.spec_l),
        }
    }
}

/// Entrywise `max(x, 0)`.
pub fn trim_nonnegative(surface: &DMatrix<f64>) -> DMatrix<f64> {
    surface.map(|x| if x < 0.0 { 0.0 } else { x })
}
