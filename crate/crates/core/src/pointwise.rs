//! Independent least-squares fits at every grid cell.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FmmError, Result};
use crate::grid::{Cell, FunctionalDataset};

/// Cells whose design has reciprocal condition number below this are rejected.
pub const MIN_CELL_RCOND: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointwiseFit {
    /// `P + 1` raw coefficient surfaces, each `R x L`.
    pub beta_raw: Vec<DMatrix<f64>>,
    /// Residual variance per cell, `RSS / (n_obs - P - 1)`.
    pub sigma2_raw: DMatrix<f64>,
    /// `(X^T X)^{-1}` per cell, column-major cell order (`l * R + r`).
    pub gram_inv: Vec<DMatrix<f64>>,
    pub n_obs: DMatrix<usize>,
    /// All covariates time-invariant and nothing missing: one design for
    /// every cell.
    pub invariant_fast_path: bool,
    /// Hat matrix `(X^T X)^{-1} X^T` shared by every cell on the fast path.
    shared_hat: Option<DMatrix<f64>>,
}

struct CellFit {
    beta: DVector<f64>,
    sigma2: f64,
    gram_inv: DMatrix<f64>,
    n_obs: usize,
}

/// Thin QR solve returning `(beta, (X^T X)^{-1})`.
fn qr_solve(x: &DMatrix<f64>, y: &DVector<f64>, cell: Cell) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let q_cols = x.ncols();
    if x.nrows() < q_cols {
        return Err(FmmError::SingularCell { cell, rcond: 0.0 });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let sv = r.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(rcond >= MIN_CELL_RCOND) {
        return Err(FmmError::SingularCell { cell, rcond });
    }
    let qty = qr.q().transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or(FmmError::SingularCell { cell, rcond })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(q_cols, q_cols))
        .ok_or(FmmError::SingularCell { cell, rcond })?;
    let gram_inv = &r_inv * r_inv.transpose();
    Ok((beta, crate::linalg::symmetrize(&gram_inv)))
}

#[inline]
pub(crate) fn cell_index(cell: Cell, r_len: usize) -> usize {
    cell.l * r_len + cell.r
}

/// Ordinary least squares at every cell over the observed subjects.
pub fn fit_pointwise(ds: &FunctionalDataset) -> Result<PointwiseFit> {
    let grid = ds.grid();
    let (r_len, l_len) = (grid.r_len(), grid.l_len());
    let q = ds.n_coefficients();
    let fast = ds.all_time_invariant() && ds.fully_observed();
    let cells: Vec<Cell> = (0..l_len)
        .flat_map(|l| (0..r_len).map(move |r| Cell::new(r, l)))
        .collect();

    let shared = if fast {
        let c0 = Cell::new(0, 0);
        let (x, _, _) = ds.cell_system(c0);
        let (_, gram_inv) = qr_solve(&x, &DVector::zeros(x.nrows()), c0)?;
        let hat = &gram_inv * x.transpose();
        Some((x, gram_inv, hat))
    } else {
        None
    };

    let fits: Vec<Result<CellFit>> = cells
        .par_iter()
        .map(|&cell| {
            let (x, y, subjects) = ds.cell_system(cell);
            let n_obs = subjects.len();
            let (beta, gram_inv) = match &shared {
                Some((_, gram_inv, hat)) => (hat * &y, gram_inv.clone()),
                None => qr_solve(&x, &y, cell)?,
            };
            let resid = &y - &x * &beta;
            let sigma2 = resid.norm_squared() / n_obs.saturating_sub(q).max(1) as f64;
            Ok(CellFit {
                beta,
                sigma2,
                gram_inv,
                n_obs,
            })
        })
        .collect();

    let mut beta_raw = vec![DMatrix::zeros(r_len, l_len); q];
    let mut sigma2_raw = DMatrix::zeros(r_len, l_len);
    let mut n_obs = DMatrix::from_element(r_len, l_len, 0usize);
    let mut gram_inv = Vec::with_capacity(cells.len());
    for (cell, fit) in cells.iter().zip(fits) {
        let fit = fit?;
        for p in 0..q {
            beta_raw[p][(cell.r, cell.l)] = fit.beta[p];
        }
        sigma2_raw[(cell.r, cell.l)] = fit.sigma2;
        n_obs[(cell.r, cell.l)] = fit.n_obs;
        gram_inv.push(fit.gram_inv);
    }
    Ok(PointwiseFit {
        beta_raw,
        sigma2_raw,
        gram_inv,
        n_obs,
        invariant_fast_path: fast,
        shared_hat: shared.map(|(_, _, hat)| hat),
    })
}

impl PointwiseFit {
    pub fn n_coefficients(&self) -> usize {
        self.beta_raw.len()
    }

    pub fn gram_inv_at(&self, cell: Cell) -> &DMatrix<f64> {
        &self.gram_inv[cell_index(cell, self.sigma2_raw.nrows())]
    }

    /// `[(X^T X)^{-1}]_{pp}` of the shared design; `None` off the fast path.
    pub fn shared_variance_factor(&self, p: usize) -> Option<f64> {
        self.invariant_fast_path
            .then(|| self.gram_inv[0][(p, p)])
    }

    /// Row `p` of the hat matrix over all `N` subjects, zero where the
    /// subject is unobserved at the cell.
    pub fn hat_row_full(&self, ds: &FunctionalDataset, p: usize, cell: Cell) -> DVector<f64> {
        if let Some(hat) = &self.shared_hat {
            return hat.row(p).transpose();
        }
        let (x, _, subjects) = ds.cell_system(cell);
        let row = self.gram_inv_at(cell).row(p) * x.transpose();
        let mut full = DVector::zeros(ds.n_subjects());
        for (k, &i) in subjects.iter().enumerate() {
            full[i] = row[k];
        }
        full
    }
}

/// Row `p` of `(X^T X)^{-1} X^T` at a cell, one entry per observed subject.
pub fn hat_row(fit: &PointwiseFit, ds: &FunctionalDataset, p: usize, cell: Cell) -> DVector<f64> {
    if let Some(hat) = &fit.shared_hat {
        return hat.row(p).transpose();
    }
    let (x, _, _) = ds.cell_system(cell);
    (fit.gram_inv_at(cell).row(p) * x.transpose()).transpose()
}

/// `Cov{beta_p(c1), beta_p(c2)} = sigma(c1; c2) <h_p(c1), h_p(c2)>`, with the
/// inner product over subjects observed at both cells.
pub fn raw_covariance(
    fit: &PointwiseFit,
    ds: &FunctionalDataset,
    p: usize,
    c1: Cell,
    c2: Cell,
    sigma_eval: impl Fn(Cell, Cell) -> f64,
) -> f64 {
    let sigma = sigma_eval(c1, c2);
    if sigma == 0.0 {
        return 0.0;
    }
    let h1 = fit.hat_row_full(ds, p, c1);
    let h2 = fit.hat_row_full(ds, p, c2);
    sigma * h1.dot(&h2)
}
