//! Smoothed coefficient and pointwise variance surfaces.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::SamplingGrid;
use crate::pointwise::PointwiseFit;
use crate::smooth::{trim_nonnegative, GcvSelection, LambdaGrid, SmootherConfig, SurfaceSmoother};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothedFit {
    pub beta_hat: Vec<DMatrix<f64>>,
    /// Smoothed pointwise variance, trimmed nonnegative.
    pub sigma2_hat: DMatrix<f64>,
    /// One smoother per coefficient, each with its own GCV choice.
    pub smoothers: Vec<SurfaceSmoother>,
    pub sigma2_smoother: SurfaceSmoother,
    /// Selections for each coefficient followed by the variance surface.
    pub selections: Vec<GcvSelection>,
}

/// GCV-tuned smoothing of every raw coefficient surface and of the raw
/// variance surface.
pub fn smooth_fit(
    fit: &PointwiseFit,
    grid: &SamplingGrid,
    n_subjects: usize,
    config: &SmootherConfig,
) -> Result<SmoothedFit> {
    let mut smoothers = Vec::with_capacity(fit.beta_raw.len());
    let mut selections = Vec::with_capacity(fit.beta_raw.len() + 1);
    let mut beta_hat = Vec::with_capacity(fit.beta_raw.len());
    for raw in &fit.beta_raw {
        let (sm, sel) = SurfaceSmoother::fit(raw, grid, n_subjects, config)?;
        beta_hat.push(sm.apply(raw));
        smoothers.push(sm);
        selections.push(sel);
    }
    let (sigma2_smoother, sel) = SurfaceSmoother::fit(&fit.sigma2_raw, grid, n_subjects, config)?;
    let sigma2_hat = trim_nonnegative(&sigma2_smoother.apply(&fit.sigma2_raw));
    selections.push(sel);
    Ok(SmoothedFit {
        beta_hat,
        sigma2_hat,
        smoothers,
        sigma2_smoother,
        selections,
    })
}

/// Coefficient surfaces of a new pointwise fit under fixed smoothers.
pub fn resmooth(fit: &PointwiseFit, smoothers: &[SurfaceSmoother]) -> Vec<DMatrix<f64>> {
    fit.beta_raw
        .iter()
        .zip(smoothers)
        .map(|(raw, sm)| sm.apply(raw))
        .collect()
}

/// Smoother config that pins one coefficient's chosen smoothing parameters.
pub fn pinned_config(base: &SmootherConfig, sm: &SurfaceSmoother) -> SmootherConfig {
    let (lr, ll) = sm.lambda();
    SmootherConfig {
        lambda_grid: LambdaGrid::fixed(lr, ll),
        ..base.clone()
    }
}
