//! B-spline bases on equally spaced knots and difference penalties.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FmmError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplineBasisSpec {
    pub num_basis: usize,
    pub degree: usize,
}

impl SplineBasisSpec {
    pub fn new(num_basis: usize, degree: usize) -> Result<Self> {
        let spec = SplineBasisSpec { num_basis, degree };
        spec.check()?;
        Ok(spec)
    }

    pub fn cubic(num_basis: usize) -> Result<Self> {
        Self::new(num_basis, 3)
    }

    fn check(&self) -> Result<()> {
        if self.num_basis < self.degree + 1 {
            return Err(FmmError::Spec(format!(
                "{} basis functions cannot carry degree {}",
                self.num_basis, self.degree
            )));
        }
        Ok(())
    }

    /// Knot spacing; `[0, 1]` is split into `K - degree` equal intervals.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.num_basis - self.degree) as f64
    }

    /// Full knot vector `(j - degree) h`, `j = 0..=K + degree`, extending past
    /// both ends of `[0, 1]`.
    pub fn knots(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..=self.num_basis + self.degree)
            .map(|j| (j as f64 - self.degree as f64) * h)
            .collect()
    }
}

/// Evaluates all `K` basis functions at each point (`|points| x K`).
pub fn bspline_basis(spec: &SplineBasisSpec, points: &[f64]) -> Result<DMatrix<f64>> {
    spec.check()?;
    let k = spec.num_basis;
    let d = spec.degree;
    let knots = spec.knots();
    let h = spec.spacing();
    let mut out = DMatrix::zeros(points.len(), k);
    let mut left = vec![0.0; d + 1];
    let mut right = vec![0.0; d + 1];
    let mut values = vec![0.0; d + 1];
    for (row, &x) in points.iter().enumerate() {
        if !(-1e-12..=1.0 + 1e-12).contains(&x) {
            return Err(FmmError::Spec(format!("point {x} outside [0, 1]")));
        }
        let x = x.clamp(0.0, 1.0);
        // span i satisfies knots[i] <= x < knots[i + 1], kept inside [d, K-1]
        let span = (d + (x / h).floor() as usize).min(k - 1);
        values[0] = 1.0;
        for j in 1..=d {
            left[j] = x - knots[span + 1 - j];
            right[j] = knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        for j in 0..=d {
            out[(row, span - d + j)] = values[j];
        }
    }
    Ok(out)
}

/// `D^T D` for the order-`m` difference operator on `K` coefficients.
pub fn difference_penalty(k: usize, m: usize) -> Result<DMatrix<f64>> {
    if m >= k {
        return Err(FmmError::Spec(format!(
            "difference order {m} needs more than {k} coefficients"
        )));
    }
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..m {
        let rows = d.nrows() - 1;
        d = DMatrix::from_fn(rows, k, |i, j| d[(i + 1, j)] - d[(i, j)]);
    }
    Ok(d.transpose() * d)
}
