//! Command-line front end: `fit`, `simulate` and `report`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::artifacts::{
    bands_svg, heatmap_svg, read_surface_csv, read_univariate_csv, safe_name, sigmap_file, surface_file,
    univariate_file, write_json, write_surface_csv, write_text, write_univariate_csv,
};
use crate::covariance::{read_bundle, write_bundle, CovarianceConfig};
use crate::error::{FmmError, Result};
use crate::grid::{load_long_csv, CsvSchema, FunctionalDataset};
use crate::inference::{BootstrapConfig, VarianceMethod, VarianceOptions};
use crate::pipeline::{fit_model, with_workers, FitOptions, ModelFit, StageTiming};
use crate::reduction::{reduce_effect, restrict_subdomain, Axis, ReductionConfig, ReductionWeights};
use crate::sim::{run_replicates, Aggregate, ReplicateSummary, Scenario, SimulationConfig};
use crate::smooth::{LambdaGrid, SmootherBackend, SmootherConfig};

pub const MANIFEST_SCHEMA: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ERROR_FILE: &str = "error.json";
pub const REPLICATES_FILE: &str = "replicates.csv";
pub const AGGREGATE_FILE: &str = "aggregate.json";
pub const COVARIANCE_DIR: &str = "covariance";

#[derive(Parser, Debug)]
#[command(name = "fmm2d", version, about = "Two-dimensional functional mixed-effect models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the model to a long-format CSV and write surfaces, bands and plots.
    Fit(FitArgs),
    /// Run simulation replicates with known truth.
    Simulate(SimArgs),
    /// Re-render plots from the CSVs of a previous fit.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Flat `key = value` file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Fraction of variance explained by the marginal eigenfunctions.
    #[arg(long)]
    pub fve: Option<f64>,
    #[arg(long)]
    pub knots_s: Option<usize>,
    #[arg(long)]
    pub knots_t: Option<usize>,
    /// `lo:hi:n` (log-spaced), `a,b,c` (both axes) or `a,b/c,d` (s/t).
    #[arg(long)]
    pub lambda_grid: Option<String>,
    #[arg(long)]
    pub boot_b: Option<usize>,
    #[arg(long)]
    pub boot_m: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// `sandwich` or `tensor`.
    #[arg(long)]
    pub backend: Option<String>,
    /// Allow the general variance path above the size guard.
    #[arg(long)]
    pub force_dense: bool,
    /// `auto`, `fast`, `factorized` or `dense`.
    #[arg(long)]
    pub variance_method: Option<String>,
    /// Re-select smoothing parameters inside every bootstrap replicate.
    #[arg(long)]
    pub bootstrap_regcv: bool,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Long CSV with columns `id,s,t,y,<covariates...>`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Directory of a saved covariance bundle to reuse.
    #[arg(long)]
    pub covariance_bundle: Option<PathBuf>,
    /// Additional fit on the `s` points within `lo:hi` (repeatable).
    #[arg(long)]
    pub subdomain: Vec<String>,
    /// Map each subdomain's `s` axis back onto [0, 1].
    #[arg(long)]
    pub renormalize_subdomain: bool,
    /// Univariate effects keeping axis `s` or `t` (repeatable).
    #[arg(long)]
    pub reduce: Vec<String>,
    /// `unweighted` or `quadrature`.
    #[arg(long)]
    pub reduce_weights: Option<String>,
}

#[derive(Args, Debug)]
pub struct SimArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// `S1` or `S2`.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub l: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub rho: Option<f64>,
    /// Positive, or `inf` to switch the random effects off.
    #[arg(long)]
    pub snr_b: Option<f64>,
    /// Positive, or `inf` to switch the measurement error off.
    #[arg(long)]
    pub snr_e: Option<f64>,
    /// `full` (B = 100, M = 1000) or `reduced` (B = 50, M = 500).
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Output directory of a previous `fit`.
    #[arg(long)]
    pub input: PathBuf,
    /// Where to write the plots (defaults to the input directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fully resolved settings, echoed into every manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub input: Option<String>,
    pub out: String,
    pub fve: f64,
    pub knots_s: Option<usize>,
    pub knots_t: Option<usize>,
    pub lambda_grid: String,
    pub boot_b: usize,
    pub boot_m: usize,
    pub alpha: f64,
    pub seed: u64,
    pub workers: usize,
    pub backend: String,
    pub force_dense: bool,
    pub variance_method: String,
    pub bootstrap_regcv: bool,
    pub covariance_bundle: Option<String>,
    pub subdomain: Vec<String>,
    pub renormalize_subdomain: bool,
    pub reduce: Vec<String>,
    pub reduce_weights: String,
    pub scenario: Option<String>,
    pub n: Option<usize>,
    pub r: Option<usize>,
    pub l: Option<usize>,
    pub reps: Option<usize>,
    pub rho: Option<f64>,
    pub snr_b: Option<f64>,
    pub snr_e: Option<f64>,
    pub preset: Option<String>,
}

/// Parses a flat `key = value` file (`#` starts a comment). Keys may use
/// `-` or `_`.
pub fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| FmmError::io(path, e))?;
    let mut map = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            FmmError::Config(format!("{}: line {}: expected `key = value`", path.display(), k + 1))
        })?;
        let key = key.trim().replace('_', "-");
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(FmmError::Config(format!("{}: line {}: duplicate key `{key}`", path.display(), k + 1)));
        }
    }
    Ok(map)
}

struct Layered {
    file: BTreeMap<String, String>,
}

impl Layered {
    fn pick<T: FromStr>(&mut self, cli: Option<T>, key: &str) -> Result<Option<T>> {
        let from_file = self.file.remove(key);
        if cli.is_some() {
            return Ok(cli);
        }
        match from_file {
            None => Ok(None),
            Some(v) => v
                .parse::<T>()
                .map(Some)
                .map_err(|_| FmmError::Config(format!("config key `{key}`: invalid value `{v}`"))),
        }
    }

    fn flag(&mut self, cli: bool, key: &str) -> Result<bool> {
        Ok(self.pick(cli.then_some(true), key)?.unwrap_or(false))
    }

    fn list(&mut self, cli: Vec<String>, key: &str) -> Vec<String> {
        let from_file = self.file.remove(key);
        if !cli.is_empty() {
            return cli;
        }
        from_file
            .map(|v| v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect())
            .unwrap_or_default()
    }

    fn finish(self) -> Result<()> {
        match self.file.keys().next() {
            Some(k) => Err(FmmError::Config(format!("unknown config key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn resolve_common(command: &str, c: &CommonArgs, layers: &mut Layered) -> Result<RunConfig> {
    let out: Option<PathBuf> = layers.pick(c.out.clone(), "out")?;
    let out = out.ok_or_else(|| FmmError::Config("--out is required".into()))?;
    Ok(RunConfig {
        command: command.into(),
        input: None,
        out: out.display().to_string(),
        fve: layers.pick(c.fve, "fve")?.unwrap_or(crate::covariance::DEFAULT_FVE),
        knots_s: layers.pick(c.knots_s, "knots-s")?,
        knots_t: layers.pick(c.knots_t, "knots-t")?,
        lambda_grid: layers.pick(c.lambda_grid.clone(), "lambda-grid")?.unwrap_or_else(|| "1e-4:1e4:10".into()),
        boot_b: layers.pick(c.boot_b, "boot-b")?.unwrap_or(0),
        boot_m: layers.pick(c.boot_m, "boot-m")?.unwrap_or(0),
        alpha: layers.pick(c.alpha, "alpha")?.unwrap_or(0.05),
        seed: layers.pick(c.seed, "seed")?.unwrap_or(1),
        workers: layers.pick(c.workers, "workers")?.unwrap_or_else(default_workers),
        backend: layers.pick(c.backend.clone(), "backend")?.unwrap_or_else(|| "sandwich".into()),
        force_dense: layers.flag(c.force_dense, "force-dense")?,
        variance_method: layers.pick(c.variance_method.clone(), "variance-method")?.unwrap_or_else(|| "auto".into()),
        bootstrap_regcv: layers.flag(c.bootstrap_regcv, "bootstrap-regcv")?,
        covariance_bundle: None,
        subdomain: vec![],
        renormalize_subdomain: false,
        reduce: vec![],
        reduce_weights: "unweighted".into(),
        scenario: None,
        n: None,
        r: None,
        l: None,
        reps: None,
        rho: None,
        snr_b: None,
        snr_e: None,
        preset: None,
    })
}

fn layers_for(c: &CommonArgs) -> Result<Layered> {
    Ok(Layered {
        file: match &c.config {
            Some(p) => parse_config_file(p)?,
            None => BTreeMap::new(),
        },
    })
}

pub fn resolve_fit(a: &FitArgs) -> Result<RunConfig> {
    let mut layers = layers_for(&a.common)?;
    let mut cfg = resolve_common("fit", &a.common, &mut layers)?;
    let input: Option<PathBuf> = layers.pick(a.input.clone(), "input")?;
    cfg.input = Some(
        input
            .ok_or_else(|| FmmError::Config("--input is required".into()))?
            .display()
            .to_string(),
    );
    let bundle: Option<PathBuf> = layers.pick(a.covariance_bundle.clone(), "covariance-bundle")?;
    cfg.covariance_bundle = bundle.map(|p| p.display().to_string());
    cfg.subdomain = layers.list(a.subdomain.clone(), "subdomain");
    cfg.renormalize_subdomain = layers.flag(a.renormalize_subdomain, "renormalize-subdomain")?;
    cfg.reduce = layers.list(a.reduce.clone(), "reduce");
    cfg.reduce_weights = layers
        .pick(a.reduce_weights.clone(), "reduce-weights")?
        .unwrap_or_else(|| "unweighted".into());
    if cfg.boot_b == 0 {
        cfg.boot_b = 100;
    }
    if cfg.boot_m == 0 {
        cfg.boot_m = 1000;
    }
    layers.finish()?;
    validate(&cfg)?;
    Ok(cfg)
}

pub fn resolve_simulate(a: &SimArgs) -> Result<RunConfig> {
    let mut layers = layers_for(&a.common)?;
    let mut cfg = resolve_common("simulate", &a.common, &mut layers)?;
    let base = SimulationConfig::baseline(Scenario::S2, cfg.seed);
    let scenario = layers.pick(a.scenario.clone(), "scenario")?.unwrap_or_else(|| "S2".into());
    Scenario::from_str(&scenario)?;
    cfg.scenario = Some(scenario);
    cfg.n = Some(layers.pick(a.n, "n")?.unwrap_or(base.n));
    cfg.r = Some(layers.pick(a.r, "r")?.unwrap_or(base.r));
    cfg.l = Some(layers.pick(a.l, "l")?.unwrap_or(base.l));
    cfg.reps = Some(layers.pick(a.reps, "reps")?.unwrap_or(20));
    cfg.rho = Some(layers.pick(a.rho, "rho")?.unwrap_or(base.rho));
    cfg.snr_b = Some(layers.pick(a.snr_b, "snr-b")?.unwrap_or(base.snr_b));
    cfg.snr_e = Some(layers.pick(a.snr_e, "snr-e")?.unwrap_or(base.snr_e));
    let preset = layers.pick(a.preset.clone(), "preset")?.unwrap_or_else(|| "full".into());
    let (b, m) = match preset.as_str() {
        "full" => (100, 1000),
        "reduced" => (50, 500),
        other => return Err(FmmError::Config(format!("unknown preset `{other}` (expected full or reduced)"))),
    };
    cfg.preset = Some(preset);
    if cfg.boot_b == 0 {
        cfg.boot_b = b;
    }
    if cfg.boot_m == 0 {
        cfg.boot_m = m;
    }
    layers.finish()?;
    validate(&cfg)?;
    Ok(cfg)
}

/// `lo:hi:n`, `a,b,c` or `a,b/c,d`.
pub fn parse_lambda_grid(spec: &str) -> Result<LambdaGrid> {
    let bad = || FmmError::Config(format!("invalid lambda grid `{spec}`"));
    let list = |s: &str| -> Result<Vec<f64>> {
        s.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect()
    };
    let grid = if let Some((r, l)) = spec.split_once('/') {
        LambdaGrid {
            r: list(r)?,
            l: list(l)?,
        }
    } else if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
        if !(lo > 0.0 && hi >= lo && n >= 1) {
            return Err(bad());
        }
        LambdaGrid::log_spaced(lo, hi, n)
    } else {
        let v = list(spec)?;
        LambdaGrid { r: v.clone(), l: v }
    };
    grid.check()?;
    Ok(grid)
}

fn parse_variance_method(s: &str) -> Result<VarianceMethod> {
    match s {
        "auto" => Ok(VarianceMethod::Auto),
        "fast" => Ok(VarianceMethod::Fast),
        "factorized" => Ok(VarianceMethod::Factorized),
        "dense" => Ok(VarianceMethod::Dense),
        other => Err(FmmError::Config(format!("unknown variance method `{other}`"))),
    }
}

fn parse_weights(s: &str) -> Result<ReductionWeights> {
    match s {
        "unweighted" => Ok(ReductionWeights::Unweighted),
        "quadrature" => Ok(ReductionWeights::Quadrature),
        other => Err(FmmError::Config(format!("unknown reduction weights `{other}`"))),
    }
}

/// `lo:hi` in input `s` units.
pub fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || FmmError::Config(format!("invalid subdomain `{s}` (expected lo:hi)"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo <= hi) {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn validate(cfg: &RunConfig) -> Result<()> {
    if !(cfg.fve > 0.0 && cfg.fve <= 1.0) {
        return Err(FmmError::Config(format!("fve must lie in (0, 1], got {}", cfg.fve)));
    }
    if cfg.workers == 0 {
        return Err(FmmError::Config("workers must be at least 1".into()));
    }
    parse_lambda_grid(&cfg.lambda_grid)?;
    SmootherBackend::from_str(&cfg.backend)?;
    parse_variance_method(&cfg.variance_method)?;
    parse_weights(&cfg.reduce_weights)?;
    for a in &cfg.reduce {
        Axis::from_str(a)?;
    }
    for s in &cfg.subdomain {
        parse_range(s)?;
    }
    fit_options(cfg)?.bootstrap.check()?;
    Ok(())
}

pub fn fit_options(cfg: &RunConfig) -> Result<FitOptions> {
    Ok(FitOptions {
        smoother: SmootherConfig {
            backend: SmootherBackend::from_str(&cfg.backend)?,
            knots_s: cfg.knots_s,
            knots_t: cfg.knots_t,
            lambda_grid: parse_lambda_grid(&cfg.lambda_grid)?,
            ..SmootherConfig::default()
        },
        covariance: CovarianceConfig {
            fve: cfg.fve,
            ..CovarianceConfig::default()
        },
        bootstrap: BootstrapConfig {
            b: cfg.boot_b,
            m: cfg.boot_m,
            alpha: cfg.alpha,
            seed: cfg.seed,
            regcv: cfg.bootstrap_regcv,
        },
        variance: VarianceOptions {
            method: parse_variance_method(&cfg.variance_method)?,
            force_dense: cfg.force_dense,
        },
    })
}

#[derive(Serialize)]
struct CoefficientSummary {
    name: String,
    file_stem: String,
    scb_quantile: f64,
    lambda_s: f64,
    lambda_t: f64,
    edf: f64,
    gcv_evaluations: usize,
    excluded_cells: usize,
    bootstrap_components: usize,
}

#[derive(Serialize)]
struct FitSummary {
    schema_version: u32,
    alpha: f64,
    boot_b: usize,
    boot_m: usize,
    seed: u64,
    knots_s: usize,
    knots_t: usize,
    coefficients: Vec<CoefficientSummary>,
    univariate: Vec<String>,
    covariance_components: usize,
    white_noise_variance: f64,
    fve_achieved: f64,
}

fn coefficient_names(ds: &FunctionalDataset) -> Vec<String> {
    std::iter::once("intercept".to_string())
        .chain(ds.covariates().iter().map(|c| c.name.clone()))
        .collect()
}

/// Writes surfaces, plots, reductions, summary and the covariance bundle.
fn write_fit_outputs(dir: &Path, ds: &FunctionalDataset, model: &ModelFit, cfg: &RunConfig) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| FmmError::io(dir, e))?;
    let grid = ds.grid();
    let names = coefficient_names(ds);
    let mut files = Vec::new();
    let mut coefficients = Vec::new();
    for (p, c) in model.inference.coefficients.iter().enumerate() {
        let stem = safe_name(&names[p]);
        let csv = surface_file(&stem);
        write_surface_csv(&dir.join(&csv), grid, c)?;
        let svg = sigmap_file(&stem);
        write_text(
            &dir.join(&svg),
            &heatmap_svg(&format!("{} (simultaneous band)", names[p]), &c.sig_map, grid.s_raw(), grid.t_raw()),
        )?;
        files.push(csv);
        files.push(svg);
        let sel = &model.smoothed.selections[p];
        let sm = &model.smoothed.smoothers[p];
        let (lambda_s, lambda_t) = sm.lambda();
        coefficients.push(CoefficientSummary {
            name: names[p].clone(),
            file_stem: stem,
            scb_quantile: c.scb_quantile,
            lambda_s,
            lambda_t,
            edf: sm.edf(),
            gcv_evaluations: sel.evaluations,
            excluded_cells: c.excluded_cells,
            bootstrap_components: c.bootstrap_components,
        });
    }
    let rcfg = ReductionConfig {
        weights: parse_weights(&cfg.reduce_weights)?,
        variance: fit_options(cfg)?.variance,
    };
    let mut univariate = Vec::new();
    for axis in &cfg.reduce {
        let axis = Axis::from_str(axis)?;
        for (p, name) in names.iter().enumerate() {
            let eff = reduce_effect(ds, model, p, axis, &rcfg)?;
            let stem = safe_name(name);
            let csv = univariate_file(&stem, axis, "csv");
            write_univariate_csv(&dir.join(&csv), &eff)?;
            let svg = univariate_file(&stem, axis, "svg");
            let tab = read_univariate_csv(&dir.join(&csv))?;
            write_text(&dir.join(&svg), &bands_svg(&format!("{name} over {axis}"), &axis.to_string(), &tab))?;
            files.push(csv.clone());
            files.push(svg);
            univariate.push(csv);
        }
    }
    let (spec_s, spec_t) = model.smoothed.smoothers[0].specs();
    let summary = FitSummary {
        schema_version: MANIFEST_SCHEMA,
        alpha: model.inference.alpha,
        boot_b: cfg.boot_b,
        boot_m: cfg.boot_m,
        seed: cfg.seed,
        knots_s: spec_s.num_basis,
        knots_t: spec_t.num_basis,
        coefficients,
        univariate,
        covariance_components: model.covariance.n_components(),
        white_noise_variance: model.covariance.eigen.phi2,
        fve_achieved: model.covariance.eigen.fve_achieved,
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    files.push(SUMMARY_FILE.into());
    write_bundle(&model.covariance, dir.join(COVARIANCE_DIR))?;
    files.push(format!("{COVARIANCE_DIR}/"));
    Ok(files)
}

#[derive(Serialize)]
struct Versions {
    fmm2d: &'static str,
    manifest_schema: u32,
}

const VERSIONS: Versions = Versions {
    fmm2d: env!("CARGO_PKG_VERSION"),
    manifest_schema: MANIFEST_SCHEMA,
};

#[derive(Serialize)]
struct DataInfo {
    n_subjects: usize,
    r: usize,
    l: usize,
    covariates: Vec<String>,
}

#[derive(Serialize)]
struct Knots {
    s: usize,
    t: usize,
    score_t: usize,
}

#[derive(Serialize)]
struct SubdomainRecord {
    range: String,
    dir: String,
    r: usize,
    stages: Vec<StageTiming>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct FitManifest<'a> {
    schema_version: u32,
    command: &'static str,
    versions: Versions,
    config: &'a RunConfig,
    data: DataInfo,
    knots: Knots,
    covariance_reused: bool,
    stages: Vec<StageTiming>,
    warnings: Vec<String>,
    files: Vec<String>,
    subdomains: Vec<SubdomainRecord>,
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.out);
    let opts = fit_options(cfg)?;
    let input = cfg.input.as_deref().unwrap_or_default();
    with_workers(cfg.workers, || -> Result<()> {
        let start = Instant::now();
        let ds = load_long_csv(input, &CsvSchema::default())?;
        let load = StageTiming {
            stage: "load".into(),
            wall_s: start.elapsed().as_secs_f64(),
        };
        let bundle = cfg.covariance_bundle.as_ref().map(read_bundle).transpose()?;
        let model = fit_model(&ds, &opts, bundle)?;
        let files = write_fit_outputs(&out, &ds, &model, cfg)?;
        let mut subdomains = Vec::new();
        for (k, range) in cfg.subdomain.iter().enumerate() {
            let (lo, hi) = parse_range(range)?;
            let sub = restrict_subdomain(&ds, lo, hi, cfg.renormalize_subdomain)?;
            let sub_model = fit_model(&sub, &opts, None)?;
            let rel = format!("subdomain_{k}");
            write_fit_outputs(&out.join(&rel), &sub, &sub_model, cfg)?;
            subdomains.push(SubdomainRecord {
                range: range.clone(),
                dir: rel,
                r: sub.grid().r_len(),
                stages: sub_model.timings,
                warnings: sub_model.warnings,
            });
        }
        let (spec_s, spec_t) = model.smoothed.smoothers[0].specs();
        let manifest = FitManifest {
            schema_version: MANIFEST_SCHEMA,
            command: "fit",
            versions: VERSIONS,
            config: cfg,
            data: DataInfo {
                n_subjects: ds.n_subjects(),
                r: ds.grid().r_len(),
                l: ds.grid().l_len(),
                covariates: ds.covariates().iter().map(|c| c.name.clone()).collect(),
            },
            knots: Knots {
                s: spec_s.num_basis,
                t: spec_t.num_basis,
                score_t: model.covariance.scores.basis_spec.num_basis,
            },
            covariance_reused: model.covariance_reused,
            stages: std::iter::once(load).chain(model.timings.iter().cloned()).collect(),
            warnings: model.warnings.clone(),
            files,
            subdomains,
        };
        write_json(&out.join(MANIFEST_FILE), &manifest)
    })?
}

#[derive(Serialize)]
struct SimManifest<'a> {
    schema_version: u32,
    command: &'static str,
    versions: Versions,
    config: &'a RunConfig,
    wall_s: f64,
    files: Vec<&'static str>,
}

fn sim_config(cfg: &RunConfig) -> Result<SimulationConfig> {
    let missing = || FmmError::Config("simulation settings were not resolved".into());
    Ok(SimulationConfig {
        n: cfg.n.ok_or_else(missing)?,
        r: cfg.r.ok_or_else(missing)?,
        l: cfg.l.ok_or_else(missing)?,
        scenario: Scenario::from_str(cfg.scenario.as_deref().ok_or_else(missing)?)?,
        rho: cfg.rho.ok_or_else(missing)?,
        snr_b: cfg.snr_b.ok_or_else(missing)?,
        snr_e: cfg.snr_e.ok_or_else(missing)?,
        seed: cfg.seed,
    })
}

pub fn write_replicates_csv(path: &Path, reps: &[ReplicateSummary]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| FmmError::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let to_err = |e: csv::Error| FmmError::Validation(format!("{}: {e}", path.display()));
    w.write_record(["rep", "seed", "ise_b0", "ise_b1", "pcb_cov", "scb_cov", "pcb_iaw", "scb_iaw", "wall_s"])
        .map_err(to_err)?;
    for r in reps {
        let ise = |p: usize| r.ise.get(p).copied().unwrap_or(f64::NAN);
        let rec = [
            r.rep.to_string(),
            r.seed.to_string(),
            ise(0).to_string(),
            ise(1).to_string(),
            r.pcb_coverage.to_string(),
            r.scb_coverage.to_string(),
            r.pcb_iaw.to_string(),
            r.scb_iaw.to_string(),
            format!("{:.6}", r.wall_s),
        ];
        w.write_record(&rec).map_err(to_err)?;
    }
    w.flush().map_err(|e| FmmError::io(path, e))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(Vec<ReplicateSummary>, Aggregate)> {
    let out = PathBuf::from(&cfg.out);
    let sim = sim_config(cfg)?;
    let opts = fit_options(cfg)?;
    let reps_n = cfg.reps.unwrap_or(1);
    let start = Instant::now();
    let (reps, agg) = with_workers(cfg.workers, || run_replicates(&sim, reps_n, &opts))??;
    fs::create_dir_all(&out).map_err(|e| FmmError::io(&out, e))?;
    write_replicates_csv(&out.join(REPLICATES_FILE), &reps)?;
    write_json(&out.join(AGGREGATE_FILE), &agg)?;
    let manifest = SimManifest {
        schema_version: MANIFEST_SCHEMA,
        command: "simulate",
        versions: VERSIONS,
        config: cfg,
        wall_s: start.elapsed().as_secs_f64(),
        files: vec![REPLICATES_FILE, AGGREGATE_FILE],
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok((reps, agg))
}

/// Renders every plot of a fit directory from its CSVs.
pub fn cmd_report(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let summary_path = input.join(SUMMARY_FILE);
    if !summary_path.exists() {
        return Err(FmmError::MissingArtifacts {
            dir: input.to_path_buf(),
            missing: vec![SUMMARY_FILE.into()],
        });
    }
    let text = fs::read_to_string(&summary_path).map_err(|e| FmmError::io(&summary_path, e))?;
    let summary: serde_json::Value = serde_json::from_str(&text).map_err(|e| FmmError::Parse {
        file: summary_path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let bad_summary = |what: &str| FmmError::Parse {
        file: summary_path.display().to_string(),
        line: 0,
        message: format!("missing or malformed `{what}`"),
    };
    let coefs = summary["coefficients"].as_array().ok_or_else(|| bad_summary("coefficients"))?;
    let mut jobs = Vec::new();
    for c in coefs {
        let name = c["name"].as_str().ok_or_else(|| bad_summary("coefficients[].name"))?;
        let stem = c["file_stem"].as_str().ok_or_else(|| bad_summary("coefficients[].file_stem"))?;
        jobs.push((name.to_string(), stem.to_string()));
    }
    let univariate: Vec<String> = summary["univariate"]
        .as_array()
        .ok_or_else(|| bad_summary("univariate"))?
        .iter()
        .map(|v| v.as_str().map(str::to_string).ok_or_else(|| bad_summary("univariate[]")))
        .collect::<Result<_>>()?;
    let missing: Vec<String> = jobs
        .iter()
        .map(|(_, stem)| surface_file(stem))
        .chain(univariate.iter().cloned())
        .filter(|f| !input.join(f).exists())
        .collect();
    if !missing.is_empty() {
        return Err(FmmError::MissingArtifacts {
            dir: input.to_path_buf(),
            missing,
        });
    }
    fs::create_dir_all(out).map_err(|e| FmmError::io(out, e))?;
    let mut written = Vec::new();
    for (name, stem) in &jobs {
        let tab = read_surface_csv(&input.join(surface_file(stem)))?;
        let path = out.join(sigmap_file(stem));
        write_text(&path, &heatmap_svg(&format!("{name} (simultaneous band)"), &tab.sig_scb, &tab.s, &tab.t))?;
        written.push(path);
    }
    for csv in &univariate {
        let tab = read_univariate_csv(&input.join(csv))?;
        let svg = csv.trim_end_matches(".csv").to_string() + ".svg";
        let axis = if svg.ends_with("_s.svg") { "s" } else { "t" };
        let title = svg.trim_start_matches("univariate_").trim_end_matches(".svg");
        let path = out.join(&svg);
        write_text(&path, &bands_svg(title, axis, &tab))?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    schema_version: u32,
    status: &'static str,
    kind: &'a str,
    exit_code: i32,
    message: String,
}

fn report_error(err: &FmmError, out: Option<&Path>) -> i32 {
    let code = err.exit_code();
    let record = ErrorRecord {
        schema_version: MANIFEST_SCHEMA,
        status: "error",
        kind: err.kind(),
        exit_code: code,
        message: err.to_string(),
    };
    eprintln!("error: {err}");
    if let Ok(line) = serde_json::to_string(&record) {
        eprintln!("{line}");
    }
    if let Some(dir) = out {
        if fs::create_dir_all(dir).is_ok() {
            let _ = write_json(&dir.join(ERROR_FILE), &record);
        }
    }
    code
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let out_hint = match &cli.command {
        Command::Fit(a) => a.common.out.clone(),
        Command::Simulate(a) => a.common.out.clone(),
        Command::Report(a) => a.out.clone(),
    };
    let result = match &cli.command {
        Command::Fit(a) => resolve_fit(a).and_then(|cfg| cmd_fit(&cfg)),
        Command::Simulate(a) => resolve_simulate(a).and_then(|cfg| cmd_simulate(&cfg).map(|_| ())),
        Command::Report(a) => cmd_report(&a.input, a.out.as_deref().unwrap_or(&a.input)).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => report_error(&e, out_hint.as_deref()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_grid_forms() {
        let g = parse_lambda_grid("1e-2:1e2:5").unwrap();
        assert_eq!(g.r.len(), 5);
        assert!((g.r[2] - 1.0).abs() < 1e-12);
        let g = parse_lambda_grid("0.1,1").unwrap();
        assert_eq!(g.len(), 4);
        let g = parse_lambda_grid("0.1/1,2,3").unwrap();
        assert_eq!((g.r.len(), g.l.len()), (1, 3));
        assert!(parse_lambda_grid("a:b").is_err());
        assert!(parse_lambda_grid("-1").is_err());
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("0.2:0.5").unwrap(), (0.2, 0.5));
        assert!(parse_range("0.5:0.2").is_err());
        assert!(parse_range("0.5").is_err());
    }

    #[test]
    fn cli_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# settings\nfve = 0.9\nboot_b = 30\nout = x\n").unwrap();
        let args = FitArgs {
            common: CommonArgs {
                config: Some(path.clone()),
                fve: Some(0.95),
                ..CommonArgs::default()
            },
            input: Some("data.csv".into()),
            covariance_bundle: None,
            subdomain: vec![],
            renormalize_subdomain: false,
            reduce: vec![],
            reduce_weights: None,
        };
        let cfg = resolve_fit(&args).unwrap();
        assert_eq!(cfg.fve, 0.95);
        assert_eq!(cfg.boot_b, 30);
        assert_eq!(cfg.boot_m, 1000);
        assert_eq!(cfg.out, "x");

        fs::write(&path, "out = x\nbogus = 1\n").unwrap();
        assert!(matches!(resolve_fit(&args), Err(FmmError::Config(_))));
    }
}
