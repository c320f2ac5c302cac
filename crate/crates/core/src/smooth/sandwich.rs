//! Axis P-spline smoothers and the sandwich smoother `S2 * raw * S1`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::basis::{bspline_basis, difference_penalty, SplineBasisSpec};
use super::LambdaGrid;
use crate::error::{FmmError, Result};
use crate::linalg::{spd_inverse, sym_eigen_desc, sym_rcond, symmetrize, trace};

const MIN_RCOND: f64 = 1e-14;
const ROTATE_RCOND: f64 = 1e-13;

/// Precomputed pieces of one axis: basis, Gram matrix and penalty.
#[derive(Clone, Debug)]
pub(crate) struct AxisSystem {
    pub basis: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub spec: SplineBasisSpec,
    pub diff_order: usize,
    /// `(A, mu)` with `A = B V`, `V^T G V = I`, `V^T P V = diag(mu)`; `None`
    /// when the Gram matrix is too ill-conditioned to rotate.
    pub rotation: Option<(DMatrix<f64>, DVector<f64>)>,
}

impl AxisSystem {
    pub fn new(points: &[f64], spec: SplineBasisSpec, diff_order: usize) -> Result<Self> {
        let basis = bspline_basis(&spec, points)?;
        let k = spec.num_basis;
        let m = effective_order(k, diff_order);
        let penalty = if m == 0 {
            DMatrix::zeros(k, k)
        } else {
            difference_penalty(k, m)?
        };
        let gram = basis.transpose() * &basis;
        let rotation = demmler_reinsch(&basis, &gram, &penalty, m);
        Ok(AxisSystem {
            basis,
            gram,
            penalty,
            spec,
            diff_order: m,
            rotation,
        })
    }

    /// `B (B^T B + lambda P)^{-1} B^T`, symmetrized.
    pub fn smoother(&self, lambda: f64) -> Result<DMatrix<f64>> {
        if let Some((a, mu)) = &self.rotation {
            let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, k| a[(i, k)] / (1.0 + lambda * mu[k]));
            return Ok(symmetrize(&(scaled * a.transpose())));
        }
        let system = &self.gram + &self.penalty * lambda;
        let inv = spd_inverse(&system, MIN_RCOND)?;
        Ok(symmetrize(&(&self.basis * inv * self.basis.transpose())))
    }
}

/// Simultaneous diagonalization of Gram and penalty from a QR of the basis,
/// `B = Q R`. The penalty null space (polynomial coefficient vectors of
/// degree below `m`) is carried through `R` explicitly and gets `mu = 0`
/// exactly; the remaining eigenvalues come from the penalty restricted to
/// its orthogonal complement.
fn demmler_reinsch(
    basis: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    m: usize,
) -> Option<(DMatrix<f64>, DVector<f64>)> {
    let (n, k) = basis.shape();
    if n < k || sym_rcond(gram) <= ROTATE_RCOND {
        return None;
    }
    let qr = basis.clone().qr();
    let (q, r) = (qr.q(), qr.r());
    let null = if m == 0 { k } else { m.min(k) };
    if null == k {
        return Some((q, DVector::zeros(k)));
    }
    let scale = (k - 1) as f64;
    let poly = DMatrix::from_fn(k, null, |i, d| (i as f64 / scale).powi(d as i32));
    let z = (&r * poly).qr().q();
    let complement = DMatrix::identity(k, k) - &z * z.transpose();
    let (_, vecs) = sym_eigen_desc(&symmetrize(&complement));
    let z_perp = vecs.columns(0, k - null).into_owned();
    let r_inv = r.solve_upper_triangular(&DMatrix::identity(k, k))?;
    let h = r_inv.transpose() * penalty * &r_inv;
    let (mu_plus, v) = sym_eigen_desc(&symmetrize(&(z_perp.transpose() * h * &z_perp)));
    let mut u = DMatrix::zeros(k, k);
    u.columns_mut(0, k - null).copy_from(&(&z_perp * v));
    u.columns_mut(k - null, null).copy_from(&z);
    let mu = DVector::from_fn(k, |i, _| if i < k - null { mu_plus[i].max(0.0) } else { 0.0 });
    Some((q * u, mu))
}

/// Difference order actually used: capped at `K - 1`, zero for a single
/// basis function (no penalty).
pub(crate) fn effective_order(k: usize, m: usize) -> usize {
    m.min(k.saturating_sub(1))
}

/// Axis smoother matrix `S = B (B^T B + lambda D^T D)^{-1} B^T`.
pub fn build_smoother(
    points: &[f64],
    spec: &SplineBasisSpec,
    diff_order: usize,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    check_lambda(lambda)?;
    AxisSystem::new(points, *spec, diff_order)?.smoother(lambda)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(FmmError::Config(format!(
            "smoothing parameter {lambda} must be finite and non-negative"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichSmoother {
    /// `L x L`, acts on the functional (`t`) axis from the right.
    pub s1: DMatrix<f64>,
    /// `R x R`, acts on the longitudinal (`s`) axis from the left.
    pub s2: DMatrix<f64>,
    /// `(lambda_R, lambda_L)`.
    pub lambda: (f64, f64),
    pub spec_r: SplineBasisSpec,
    pub spec_l: SplineBasisSpec,
    /// `(m_R, m_L)`.
    pub diff_order: (usize, usize),
    /// `(tr S2, tr S1)`.
    pub edf: (f64, f64),
}

impl SandwichSmoother {
    pub fn build(
        s_points: &[f64],
        t_points: &[f64],
        spec_r: SplineBasisSpec,
        spec_l: SplineBasisSpec,
        diff_order: (usize, usize),
        lambda: (f64, f64),
    ) -> Result<Self> {
        check_lambda(lambda.0)?;
        check_lambda(lambda.1)?;
        let ax_r = AxisSystem::new(s_points, spec_r, diff_order.0)?;
        let ax_l = AxisSystem::new(t_points, spec_l, diff_order.1)?;
        Self::from_axes(&ax_r, &ax_l, lambda)
    }

    fn from_axes(ax_r: &AxisSystem, ax_l: &AxisSystem, lambda: (f64, f64)) -> Result<Self> {
        let s2 = ax_r.smoother(lambda.0)?;
        let s1 = ax_l.smoother(lambda.1)?;
        let edf = (trace(&s2), trace(&s1));
        Ok(SandwichSmoother {
            s1,
            s2,
            lambda,
            spec_r: ax_r.spec,
            spec_l: ax_l.spec,
            diff_order: (ax_r.diff_order, ax_l.diff_order),
            edf,
        })
    }

    /// Picks `(lambda_R, lambda_L)` on the grid by GCV and builds the smoother.
    pub fn fit_gcv(
        raw: &DMatrix<f64>,
        s_points: &[f64],
        t_points: &[f64],
        spec_r: SplineBasisSpec,
        spec_l: SplineBasisSpec,
        diff_order: (usize, usize),
        grid: &LambdaGrid,
    ) -> Result<(Self, GcvSelection)> {
        let ax_r = AxisSystem::new(s_points, spec_r, diff_order.0)?;
        let ax_l = AxisSystem::new(t_points, spec_l, diff_order.1)?;
        let sel = gcv_search(raw, &ax_r, &ax_l, grid)?;
        let sm = Self::from_axes(&ax_r, &ax_l, (sel.lambda_r, sel.lambda_l))?;
        Ok((sm, sel))
    }

    pub fn apply(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        smooth_surface(raw, self)
    }
}

/// `S2 * raw * S1`.
pub fn smooth_surface(raw: &DMatrix<f64>, sm: &SandwichSmoother) -> DMatrix<f64> {
    &sm.s2 * raw * &sm.s1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcvSelection {
    pub lambda_r: f64,
    pub lambda_l: f64,
    pub score: f64,
    /// Number of GCV criterion evaluations performed.
    pub evaluations: usize,
}

/// GCV over every `(lambda_R, lambda_L)` pair of the grid for the sandwich
/// smoother; see [`select_lambda_gcv`].
pub(crate) fn gcv_search(
    raw: &DMatrix<f64>,
    ax_r: &AxisSystem,
    ax_l: &AxisSystem,
    grid: &LambdaGrid,
) -> Result<GcvSelection> {
    grid.check()?;
    if grid.len() == 1 {
        return Ok(GcvSelection {
            lambda_r: grid.r[0],
            lambda_l: grid.l[0],
            score: f64::NAN,
            evaluations: 0,
        });
    }
    let s2s: Vec<DMatrix<f64>> = grid
        .r
        .iter()
        .map(|&lam| ax_r.smoother(lam))
        .collect::<Result<_>>()?;
    let s1s: Vec<DMatrix<f64>> = grid
        .l
        .iter()
        .map(|&lam| ax_l.smoother(lam))
        .collect::<Result<_>>()?;
    // left products S2 * raw are shared across lambda_L
    let left: Vec<DMatrix<f64>> = s2s.iter().map(|s2| s2 * raw).collect();
    let n = raw.len();
    let pairs: Vec<(usize, usize)> = (0..grid.r.len())
        .flat_map(|a| (0..grid.l.len()).map(move |b| (a, b)))
        .collect();
    let scores: Vec<Result<f64>> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let fitted = &left[a] * &s1s[b];
            let rss = (raw - fitted).norm_squared();
            let edf = trace(&s2s[a]) * trace(&s1s[b]);
            gcv_score(rss, edf, n)
        })
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    let scale = raw.norm_squared() / n as f64;
    pick_best(grid, &pairs, &scores, scale)
}

pub(crate) fn gcv_score(rss: f64, edf: f64, n: usize) -> Result<f64> {
    let denom = n as f64 - edf;
    if !(denom > 1e-8 * n as f64) {
        return Err(FmmError::OverParameterized { edf, n });
    }
    Ok(n as f64 * rss / (denom * denom))
}

/// Minimum GCV with ties resolved toward the larger `(lambda_R, lambda_L)`.
pub(crate) fn pick_best(
    grid: &LambdaGrid,
    pairs: &[(usize, usize)],
    scores: &[f64],
    scale: f64,
) -> Result<GcvSelection> {
    let mut best: Option<usize> = None;
    for k in 0..pairs.len() {
        let Some(b) = best else {
            best = Some(k);
            continue;
        };
        let (cur, inc) = (scores[k], scores[b]);
        let tol = 1e-10 * cur.abs().max(inc.abs()) + 1e-24 * scale;
        let better = if (cur - inc).abs() <= tol {
            let key = |i: usize| (grid.r[pairs[i].0], grid.l[pairs[i].1]);
            key(k).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Greater)
        } else {
            cur < inc
        };
        if better {
            best = Some(k);
        }
    }
    let b = best.ok_or_else(|| FmmError::Config("empty lambda grid".into()))?;
    Ok(GcvSelection {
        lambda_r: grid.r[pairs[b].0],
        lambda_l: grid.l[pairs[b].1],
        score: scores[b],
        evaluations: pairs.len(),
    })
}

/// GCV choice of `(lambda_R, lambda_L)` for the sandwich smoother:
/// `RL * ||raw - S2 raw S1||_F^2 / (RL - tr(S1) tr(S2))^2`.
pub fn select_lambda_gcv(
    raw: &DMatrix<f64>,
    s_points: &[f64],
    t_points: &[f64],
    spec_r: SplineBasisSpec,
    spec_l: SplineBasisSpec,
    diff_order: (usize, usize),
    grid: &LambdaGrid,
) -> Result<GcvSelection> {
    let ax_r = AxisSystem::new(s_points, spec_r, diff_order.0)?;
    let ax_l = AxisSystem::new(t_points, spec_l, diff_order.1)?;
    gcv_search(raw, &ax_r, &ax_l, grid)
}
