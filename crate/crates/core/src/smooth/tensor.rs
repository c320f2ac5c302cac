//! Tensor-product P-spline surface smoother with additive row/column
//! difference penalties `lambda_R (P_R x I) + lambda_L (I x P_L)`.
//!
//! Each axis is reparameterized so that its Gram matrix becomes the identity
//! and its penalty diagonal (`V^T G V = I`, `V^T P V = diag(mu)`). In those
//! coordinates the penalized normal equations decouple and the fit is
//! `A_R (W o (A_R^T raw A_L)) A_L^T` with `W_ab = 1 / (1 + lambda_R mu_a +
//! lambda_L mu_b)` and `A = B V`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::basis::SplineBasisSpec;
use super::sandwich::{check_lambda, gcv_score, pick_best, AxisSystem, GcvSelection};
use super::LambdaGrid;
use crate::error::{FmmError, Result};
use crate::linalg::sym_rcond;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorProductSmoother {
    /// `R x K_R` rotated basis.
    pub a_r: DMatrix<f64>,
    /// `L x K_L` rotated basis.
    pub a_l: DMatrix<f64>,
    pub mu_r: DVector<f64>,
    pub mu_l: DVector<f64>,
    /// `K_R x K_L` shrinkage factors.
    pub weights: DMatrix<f64>,
    pub lambda: (f64, f64),
    pub spec_r: SplineBasisSpec,
    pub spec_l: SplineBasisSpec,
    pub diff_order: (usize, usize),
    pub edf: f64,
}

struct RotatedAxis {
    a: DMatrix<f64>,
    mu: DVector<f64>,
    spec: SplineBasisSpec,
    diff_order: usize,
}

fn rotate(ax: &AxisSystem) -> Result<RotatedAxis> {
    let (a, mu) = ax.rotation.clone().ok_or_else(|| FmmError::IllConditioned {
        condition: 1.0 / sym_rcond(&ax.gram),
    })?;
    Ok(RotatedAxis {
        a,
        mu,
        spec: ax.spec,
        diff_order: ax.diff_order,
    })
}

fn shrinkage(mu_r: &DVector<f64>, mu_l: &DVector<f64>, lambda: (f64, f64)) -> DMatrix<f64> {
    DMatrix::from_fn(mu_r.len(), mu_l.len(), |a, b| {
        1.0 / (1.0 + lambda.0 * mu_r[a] + lambda.1 * mu_l[b])
    })
}

impl TensorProductSmoother {
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
        let r = rotate(&AxisSystem::new(s_points, spec_r, diff_order.0)?)?;
        let l = rotate(&AxisSystem::new(t_points, spec_l, diff_order.1)?)?;
        Ok(Self::assemble(r, l, lambda))
    }

    fn assemble(r: RotatedAxis, l: RotatedAxis, lambda: (f64, f64)) -> Self {
        let weights = shrinkage(&r.mu, &l.mu, lambda);
        let edf = weights.sum();
        TensorProductSmoother {
            a_r: r.a,
            a_l: l.a,
            mu_r: r.mu,
            mu_l: l.mu,
            weights,
            lambda,
            spec_r: r.spec,
            spec_l: l.spec,
            diff_order: (r.diff_order, l.diff_order),
            edf,
        }
    }

    /// GCV-tuned tensor-product smoother over the lambda grid.
    pub fn fit_gcv(
        raw: &DMatrix<f64>,
        s_points: &[f64],
        t_points: &[f64],
        spec_r: SplineBasisSpec,
        spec_l: SplineBasisSpec,
        diff_order: (usize, usize),
        grid: &LambdaGrid,
    ) -> Result<(Self, GcvSelection)> {
        grid.check()?;
        let r = rotate(&AxisSystem::new(s_points, spec_r, diff_order.0)?)?;
        let l = rotate(&AxisSystem::new(t_points, spec_l, diff_order.1)?)?;
        if grid.len() == 1 {
            let lambda = (grid.r[0], grid.l[0]);
            let sel = GcvSelection {
                lambda_r: lambda.0,
                lambda_l: lambda.1,
                score: f64::NAN,
                evaluations: 0,
            };
            return Ok((Self::assemble(r, l, lambda), sel));
        }
        let coef = r.a.transpose() * raw * &l.a;
        let n = raw.len();
        let pairs: Vec<(usize, usize)> = (0..grid.r.len())
            .flat_map(|a| (0..grid.l.len()).map(move |b| (a, b)))
            .collect();
        let scores: Vec<Result<f64>> = pairs
            .par_iter()
            .map(|&(a, b)| {
                let w = shrinkage(&r.mu, &l.mu, (grid.r[a], grid.l[b]));
                let fitted = &r.a * coef.component_mul(&w) * l.a.transpose();
                gcv_score((raw - fitted).norm_squared(), w.sum(), n)
            })
            .collect();
        let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
        let sel = pick_best(grid, &pairs, &scores, raw.norm_squared() / n as f64)?;
        Ok((Self::assemble(r, l, (sel.lambda_r, sel.lambda_l)), sel))
    }

    pub fn apply(&self, raw: &DMatrix<f64>) -> DMatrix<f64> {
        let coef = self.a_r.transpose() * raw * &self.a_l;
        &self.a_r * coef.component_mul(&self.weights) * self.a_l.transpose()
    }

    /// Row of the smoother matrix for output cell `(r, l)`, as an `R x L`
    /// surface of weights.
    pub fn cell_weights(&self, r: usize, l: usize) -> DMatrix<f64> {
        let core = DMatrix::from_fn(self.weights.nrows(), self.weights.ncols(), |a, b| {
            self.a_r[(r, a)] * self.weights[(a, b)] * self.a_l[(l, b)]
        });
        &self.a_r * core * self.a_l.transpose()
    }
}

/// Penalized tensor-product fit of `raw`, GCV-tuned over the lambda grid.
pub fn build_tensor_product_smoother(
    raw: &DMatrix<f64>,
    s_points: &[f64],
    t_points: &[f64],
    spec_r: SplineBasisSpec,
    spec_l: SplineBasisSpec,
    diff_order: (usize, usize),
    grid: &LambdaGrid,
) -> Result<DMatrix<f64>> {
    let (sm, _) =
        TensorProductSmoother::fit_gcv(raw, s_points, t_points, spec_r, spec_l, diff_order, grid)?;
    Ok(sm.apply(raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SamplingGrid;

    #[test]
    fn constants_survive() {
        let g = SamplingGrid::midpoint(10, 40);
        let raw = DMatrix::from_element(10, 40, -1.25);
        let out = build_tensor_product_smoother(
            &raw,
            g.s_points(),
            g.t_points(),
            SplineBasisSpec::cubic(5).unwrap(),
            SplineBasisSpec::cubic(12).unwrap(),
            (2, 2),
            &LambdaGrid::default(),
        )
        .unwrap();
        assert!((out - raw).amax() < 1e-10);
    }

    #[test]
    fn saturated_interpolates() {
        let g = SamplingGrid::midpoint(5, 7);
        let raw = DMatrix::from_fn(5, 7, |r, l| ((r * 3 + l * 5) % 4) as f64 - 1.0);
        let out = build_tensor_product_smoother(
            &raw,
            g.s_points(),
            g.t_points(),
            SplineBasisSpec::new(5, 0).unwrap(),
            SplineBasisSpec::new(7, 0).unwrap(),
            (2, 2),
            &LambdaGrid {
                r: vec![0.0],
                l: vec![0.0],
            },
        )
        .unwrap();
        assert!((out - raw).amax() < 1e-8);
    }

    #[test]
    fn cell_weights_reproduce_apply() {
        let g = SamplingGrid::midpoint(6, 15);
        let sm = TensorProductSmoother::build(
            g.s_points(),
            g.t_points(),
            SplineBasisSpec::cubic(4).unwrap(),
            SplineBasisSpec::cubic(8).unwrap(),
            (2, 2),
            (0.3, 2.0),
        )
        .unwrap();
        let raw = DMatrix::from_fn(6, 15, |r, l| (r as f64 * 0.7).cos() * (l as f64 * 0.2).sin());
        let fit = sm.apply(&raw);
        for &(r, l) in &[(0, 0), (3, 7), (5, 14)] {
            let w = sm.cell_weights(r, l);
            assert!((w.component_mul(&raw).sum() - fit[(r, l)]).abs() < 1e-12);
        }
    }
}
