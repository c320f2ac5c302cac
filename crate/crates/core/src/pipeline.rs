//! End-to-end model fit: pointwise regressions, smoothing, covariance,
//! inference.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::covariance::{fit_covariance, CovarianceConfig, CovarianceModel};
use crate::error::{FmmError, Result};
use crate::fixed::{smooth_fit, SmoothedFit};
use crate::grid::FunctionalDataset;
use crate::inference::{infer, BootstrapConfig, InferenceResult, VarianceOptions};
use crate::pointwise::{fit_pointwise, PointwiseFit};
use crate::smooth::SmootherConfig;

pub const STAGES: [&str; 5] = ["load", "pointwise", "smoothing", "covariance", "inference"];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub smoother: SmootherConfig,
    pub covariance: CovarianceConfig,
    pub bootstrap: BootstrapConfig,
    pub variance: VarianceOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_s: f64,
}

#[derive(Clone, Debug)]
pub struct ModelFit {
    pub pointwise: PointwiseFit,
    pub smoothed: SmoothedFit,
    pub covariance: CovarianceModel,
    /// True when the covariance came from a saved bundle.
    pub covariance_reused: bool,
    pub inference: InferenceResult,
    pub timings: Vec<StageTiming>,
    pub warnings: Vec<String>,
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    timings.push(StageTiming {
        stage: stage.to_string(),
        wall_s: start.elapsed().as_secs_f64(),
    });
    Ok(out)
}

/// Runs every stage. A supplied covariance model replaces the covariance
/// stage (its timing is then recorded as zero).
pub fn fit_model(
    ds: &FunctionalDataset,
    opts: &FitOptions,
    covariance: Option<CovarianceModel>,
) -> Result<ModelFit> {
    let mut timings = Vec::new();
    let mut warnings = Vec::new();
    let pointwise = timed(&mut timings, "pointwise", || fit_pointwise(ds))?;
    let smoothed = timed(&mut timings, "smoothing", || {
        smooth_fit(&pointwise, ds.grid(), ds.n_subjects(), &opts.smoother)
    })?;
    let covariance_reused = covariance.is_some();
    let covariance = timed(&mut timings, "covariance", || match covariance {
        Some(model) => {
            if model.grid != *ds.grid() {
                return Err(FmmError::Validation(
                    "covariance bundle was estimated on a different grid".into(),
                ));
            }
            Ok(model)
        }
        None => {
            let (model, w) = fit_covariance(
                ds,
                &smoothed.beta_hat,
                smoothed.sigma2_hat.clone(),
                &opts.covariance,
            )?;
            warnings.extend(w);
            Ok(model)
        }
    })?;
    let inference = timed(&mut timings, "inference", || {
        infer(
            ds,
            &pointwise,
            &smoothed,
            &covariance,
            &opts.smoother,
            &opts.covariance,
            &opts.bootstrap,
            &opts.variance,
        )
    })?;
    warnings.extend(inference.warnings.iter().cloned());
    Ok(ModelFit {
        pointwise,
        smoothed,
        covariance,
        covariance_reused,
        inference,
        timings,
        warnings,
    })
}

/// Runs `f` inside a dedicated pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Err(FmmError::Config("workers must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| FmmError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(f))
}
