//! Synthetic data with known coefficient surfaces, accuracy metrics, and a
//! replicate harness.

use std::f64::consts::PI;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FmmError, Result};
use crate::grid::{Covariate, FunctionalDataset, SamplingGrid};
use crate::pipeline::{fit_model, FitOptions};
use crate::rng::{derive_seed, rng_for, std_normal, STREAM_REPLICATE, STREAM_SIMULATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Sparse, non-differentiable slope with zero regions.
    S1,
    /// Smooth slope with zero crossings.
    S2,
}

impl FromStr for Scenario {
    type Err = FmmError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" => Ok(Scenario::S1),
            "S2" | "s2" => Ok(Scenario::S2),
            other => Err(FmmError::Config(format!(
                "unknown scenario `{other}` (expected S1 or S2)"
            ))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::S1 => "S1",
            Scenario::S2 => "S2",
        })
    }
}

/// Region where the S1 slope can be nonzero: the `+-5 alpha` rectangles
/// intersected with the support of `alpha`.
pub const S1_EFFECTIVE_SUPPORT: ((f64, f64), (f64, f64)) = ((0.2, 0.4), (0.14, 0.38));

fn inside(x: f64, lo: f64, hi: f64) -> bool {
    (lo..=hi).contains(&x)
}

fn in_rect(s: f64, t: f64, rs: (f64, f64), rt: (f64, f64)) -> bool {
    inside(s, rs.0, rs.1) && inside(t, rt.0, rt.1)
}

/// `(beta0(s, t), beta1(s, t))`.
pub fn eval_truth(scenario: Scenario, s: f64, t: f64) -> (f64, f64) {
    let b0 = 3.0 * (PI * (s + 0.5).powi(2)).sin() * (PI * t + 0.5).cos() + 1.0;
    let b1 = match scenario {
        Scenario::S2 => 5.0 * (0.5 * PI * (s + 0.5).powi(2)).sin() * (2.0 * PI * t + 0.5).cos(),
        Scenario::S1 => {
            let alpha = if in_rect(s, t, (0.2, 0.5), (0.14, 0.38)) {
                (0.8 * PI * (s + 0.5).powi(2)).sin() * (4.0 * PI * t).cos()
            } else {
                0.0
            };
            let plus = in_rect(s, t, (0.1, 0.4), (0.14, 0.38)) || in_rect(s, t, (0.7, 1.0), (0.62, 0.86));
            let minus = in_rect(s, t, (0.7, 1.0), (0.14, 0.38)) || in_rect(s, t, (0.1, 0.4), (0.62, 0.86));
            if plus {
                5.0 * alpha
            } else if minus {
                -5.0 * alpha
            } else {
                0.0
            }
        }
    };
    (b0, b1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthSurfaces {
    pub beta0: DMatrix<f64>,
    pub beta1: DMatrix<f64>,
}

impl TruthSurfaces {
    pub fn on_grid(scenario: Scenario, grid: &SamplingGrid) -> Self {
        let (s, t) = (grid.s_points(), grid.t_points());
        let beta0 = DMatrix::from_fn(s.len(), t.len(), |r, l| eval_truth(scenario, s[r], t[l]).0);
        let beta1 = DMatrix::from_fn(s.len(), t.len(), |r, l| eval_truth(scenario, s[r], t[l]).1);
        TruthSurfaces { beta0, beta1 }
    }

    pub fn get(&self, p: usize) -> &DMatrix<f64> {
        if p == 0 {
            &self.beta0
        } else {
            &self.beta1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub r: usize,
    pub l: usize,
    pub scenario: Scenario,
    pub rho: f64,
    /// `f64::INFINITY` switches the random effects off.
    pub snr_b: f64,
    /// `f64::INFINITY` switches the measurement error off.
    pub snr_e: f64,
    pub seed: u64,
}

impl SimulationConfig {
    /// The baseline design: `N = 50`, `R = 10`, `L = 100`, `rho = 0.5`,
    /// both signal-to-noise ratios 1.
    pub fn baseline(scenario: Scenario, seed: u64) -> Self {
        SimulationConfig {
            n: 50,
            r: 10,
            l: 100,
            scenario,
            rho: 0.5,
            snr_b: 1.0,
            snr_e: 1.0,
            seed,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n < 2 || self.r < 2 || self.l < 2 {
            return Err(FmmError::Config(format!(
                "simulation sizes must be at least 2 (N = {}, R = {}, L = {})",
                self.n, self.r, self.l
            )));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(FmmError::Config(format!("rho = {} must be finite and >= 0", self.rho)));
        }
        for (name, v) in [("snr_b", self.snr_b), ("snr_e", self.snr_e)] {
            if !(v > 0.0) {
                return Err(FmmError::Config(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// L2-normalized random-effect basis `(phi_1l(t), phi_2l(t))`.
pub fn random_effect_basis(l: usize, t: f64) -> (f64, f64) {
    let w = 2.0 * PI * t;
    match l {
        0 => ((1.5 - w.sin() - w.cos()) / 3.25f64.sqrt(), 2f64.sqrt() * (2.0 * w).sin()),
        _ => (2f64.sqrt() * w.cos(), 2f64.sqrt() * w.sin()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedData {
    pub dataset: FunctionalDataset,
    pub truth: TruthSurfaces,
    pub sigma_b: f64,
    pub sigma_e: f64,
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean).powi(2)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Draws one dataset: `Y = beta0 + X beta1 + gamma_0(t) + z(s) gamma_1(t) +
/// eps`, with `sigma_B` and `sigma_eps` calibrated on the realized sample.
pub fn generate(cfg: &SimulationConfig) -> Result<SimulatedData> {
    cfg.check()?;
    let grid = SamplingGrid::midpoint(cfg.r, cfg.l);
    let truth = TruthSurfaces::on_grid(cfg.scenario, &grid);
    let t = grid.t_points();
    let mut rng = rng_for(cfg.seed, STREAM_SIMULATE, 0);
    let s = grid.s_points();
    let mut x = Vec::with_capacity(cfg.n);
    let mut fixed = Vec::with_capacity(cfg.n);
    let mut random = Vec::with_capacity(cfg.n);
    let phi: Vec<[(f64, f64); 2]> = t
        .iter()
        .map(|&tl| [random_effect_basis(0, tl), random_effect_basis(1, tl)])
        .collect();
    for _ in 0..cfg.n {
        let xi: Vec<f64> = (0..cfg.r).map(|_| 2.0 * std_normal(&mut rng)).collect();
        let zi: Vec<f64> = (0..cfg.r)
            .map(|r| 6.0 * (s[r] - 0.5).powi(2) + cfg.rho * std_normal(&mut rng))
            .collect();
        let a1 = 2f64.sqrt() * std_normal(&mut rng);
        let a2 = std_normal(&mut rng);
        fixed.push(DMatrix::from_fn(cfg.r, cfg.l, |r, l| {
            truth.beta0[(r, l)] + xi[r] * truth.beta1[(r, l)]
        }));
        random.push(DMatrix::from_fn(cfg.r, cfg.l, |r, l| {
            let [p0, p1] = phi[l];
            let g0 = a1 * p0.0 + a2 * p0.1;
            let g1 = a1 * p1.0 + a2 * p1.1;
            g0 + zi[r] * g1
        }));
        x.push(DMatrix::from_fn(cfg.r, cfg.l, |r, _| xi[r]));
    }
    let noise: Vec<DMatrix<f64>> = (0..cfg.n)
        .map(|_| DMatrix::from_fn(cfg.r, cfg.l, |_, _| std_normal(&mut rng)))
        .collect();

    let sd_fixed = sample_sd(fixed.iter().flat_map(|m| m.iter().copied()));
    if !(sd_fixed > 0.0) {
        return Err(FmmError::Degenerate("fixed-effect surfaces have zero spread".into()));
    }
    let sigma_b = if cfg.snr_b.is_infinite() {
        0.0
    } else {
        let sd_random = sample_sd(random.iter().flat_map(|m| m.iter().copied()));
        if sd_random > 0.0 {
            sd_fixed / (cfg.snr_b * sd_random)
        } else {
            0.0
        }
    };
    let linear: Vec<DMatrix<f64>> = fixed
        .iter()
        .zip(&random)
        .map(|(f, g)| f + g * sigma_b)
        .collect();
    let sigma_e = if cfg.snr_e.is_infinite() {
        0.0
    } else {
        let sd_lin = sample_sd(linear.iter().flat_map(|m| m.iter().copied()));
        let sd_noise = sample_sd(noise.iter().flat_map(|m| m.iter().copied()));
        sd_lin / (cfg.snr_e * sd_noise)
    };
    let y: Vec<DMatrix<f64>> = linear
        .iter()
        .zip(&noise)
        .map(|(lin, e)| lin + e * sigma_e)
        .collect();
    let dataset = FunctionalDataset::complete(
        grid,
        y,
        vec![Covariate::time_varying("x", x)],
        (1..=cfg.n).map(|i| i.to_string()).collect(),
    )?;
    Ok(SimulatedData {
        dataset,
        truth,
        sigma_b,
        sigma_e,
    })
}

fn cell_weights(grid: &SamplingGrid) -> DMatrix<f64> {
    let (sw, tw) = (grid.s_weights(), grid.t_weights());
    let total: f64 = sw.iter().sum::<f64>() * tw.iter().sum::<f64>();
    DMatrix::from_fn(sw.len(), tw.len(), |r, l| sw[r] * tw[l] / total)
}

/// Quadrature-weighted mean squared difference.
pub fn ise(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, grid: &SamplingGrid) -> f64 {
    let w = cell_weights(grid);
    estimate
        .iter()
        .zip(truth.iter())
        .zip(w.iter())
        .map(|((e, t), w)| w * (e - t).powi(2))
        .sum()
}

/// `(coverage, iaw)`: weighted share of cells whose band contains the truth
/// and weighted mean band width.
pub fn band_metrics(
    lower: &DMatrix<f64>,
    upper: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    grid: &SamplingGrid,
) -> (f64, f64) {
    let w = cell_weights(grid);
    let mut coverage = 0.0;
    let mut iaw = 0.0;
    for c in 0..w.len() {
        if lower[c] <= truth[c] && truth[c] <= upper[c] {
            coverage += w[c];
        }
        iaw += w[c] * (upper[c] - lower[c]);
    }
    (coverage.clamp(0.0, 1.0), iaw.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub rep: usize,
    pub seed: u64,
    /// ISE of `beta0` and `beta1`.
    pub ise: Vec<f64>,
    /// Band metrics of the slope `beta1`.
    pub pcb_coverage: f64,
    pub scb_coverage: f64,
    pub pcb_iaw: f64,
    pub scb_iaw: f64,
    pub scb_quantile: f64,
    pub sigma_b: f64,
    pub sigma_e: f64,
    pub wall_s: f64,
    pub error: Option<String>,
}

impl ReplicateSummary {
    fn failed(rep: usize, seed: u64, wall_s: f64, err: FmmError) -> Self {
        ReplicateSummary {
            rep,
            seed,
            ise: vec![f64::NAN, f64::NAN],
            pcb_coverage: f64::NAN,
            scb_coverage: f64::NAN,
            pcb_iaw: f64::NAN,
            scb_iaw: f64::NAN,
            scb_quantile: f64::NAN,
            sigma_b: f64::NAN,
            sigma_e: f64::NAN,
            wall_s,
            error: Some(err.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

fn mean_sd(values: &[f64]) -> MeanSd {
    if values.is_empty() {
        return MeanSd { mean: None, sd: None };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    MeanSd { mean: Some(mean), sd }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub replicates: usize,
    pub failed: usize,
    pub ise_b0: MeanSd,
    pub ise_b1: MeanSd,
    pub pcb_coverage: MeanSd,
    pub scb_coverage: MeanSd,
    pub pcb_iaw: MeanSd,
    pub scb_iaw: MeanSd,
    pub scb_quantile: MeanSd,
    pub wall_s: MeanSd,
}

pub fn aggregate(reps: &[ReplicateSummary]) -> Aggregate {
    let ok: Vec<&ReplicateSummary> = reps.iter().filter(|r| r.error.is_none()).collect();
    let col = |f: &dyn Fn(&ReplicateSummary) -> f64| mean_sd(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
    Aggregate {
        replicates: reps.len(),
        failed: reps.len() - ok.len(),
        ise_b0: col(&|r| r.ise[0]),
        ise_b1: col(&|r| r.ise[1]),
        pcb_coverage: col(&|r| r.pcb_coverage),
        scb_coverage: col(&|r| r.scb_coverage),
        pcb_iaw: col(&|r| r.pcb_iaw),
        scb_iaw: col(&|r| r.scb_iaw),
        scb_quantile: col(&|r| r.scb_quantile),
        wall_s: col(&|r| r.wall_s),
    }
}

/// Seed of replicate `rep` under the master seed.
pub fn replicate_seed(master: u64, rep: usize) -> u64 {
    derive_seed(master, STREAM_REPLICATE, rep as u64)
}

/// Generates and fits one replicate with the given seed.
pub fn run_one(cfg: &SimulationConfig, opts: &FitOptions, rep: usize, seed: u64) -> ReplicateSummary {
    let start = Instant::now();
    let attempt = || -> Result<ReplicateSummary> {
        let sim = generate(&SimulationConfig { seed, ..cfg.clone() })?;
        let mut fit_opts = opts.clone();
        fit_opts.bootstrap.seed = seed;
        let fit = fit_model(&sim.dataset, &fit_opts, None)?;
        let grid = sim.dataset.grid();
        let coefs = &fit.inference.coefficients;
        let ise_all = (0..2).map(|p| ise(&coefs[p].beta_hat, sim.truth.get(p), grid)).collect();
        let c = &coefs[1];
        let (pcb_coverage, pcb_iaw) = band_metrics(&c.pcb_lower, &c.pcb_upper, &sim.truth.beta1, grid);
        let (scb_coverage, scb_iaw) = band_metrics(&c.scb_lower, &c.scb_upper, &sim.truth.beta1, grid);
        Ok(ReplicateSummary {
            rep,
            seed,
            ise: ise_all,
            pcb_coverage,
            scb_coverage,
            pcb_iaw,
            scb_iaw,
            scb_quantile: c.scb_quantile,
            sigma_b: sim.sigma_b,
            sigma_e: sim.sigma_e,
            wall_s: 0.0,
            error: None,
        })
    };
    let out = attempt();
    let wall_s = start.elapsed().as_secs_f64();
    match out {
        Ok(mut s) => {
            s.wall_s = wall_s;
            s
        }
        Err(e) => ReplicateSummary::failed(rep, seed, wall_s, e),
    }
}

/// `n_rep` independent replicates with seeds derived from `cfg.seed`;
/// failures are recorded, not fatal.
pub fn run_replicates(cfg: &SimulationConfig, n_rep: usize, opts: &FitOptions) -> Result<(Vec<ReplicateSummary>, Aggregate)> {
    cfg.check()?;
    if n_rep == 0 {
        return Err(FmmError::Config("need at least one replicate".into()));
    }
    let reps: Vec<ReplicateSummary> = (0..n_rep)
        .into_par_iter()
        .map(|rep| run_one(cfg, opts, rep, replicate_seed(cfg.seed, rep)))
        .collect();
    let agg = aggregate(&reps);
    Ok((reps, agg))
}
