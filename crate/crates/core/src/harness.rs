//! Error metrics, the structure-agnostic baseline, and the synthetic
//! experiment suites over the sparsity-undersampling and dynamics planes.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ampcore::{amp_frame, LocalPrior};
use crate::em::{em_loop, init_heuristics, EmConfig};
use crate::error::{Error, Result};
use crate::linalg::{dist_sqr, norm_sqr, C64};
use crate::model::{generate_synthetic_with, mix_seed, Dims, DynamicDataset, GenerateOptions, ModelParams};
use crate::oracle::{sks_estimate_cg, OracleProblem};
use crate::posterior::PosteriorEstimates;
use crate::scheduler::{smooth, SolverConfig};

/// Time-averaged normalized squared error. Every true frame must be nonzero.
pub fn tnmse(truth: &[Vec<C64>], estimate: &[Vec<C64>]) -> Result<f64> {
    let (value, excluded) = tnmse_excluding_empty(truth, estimate)?;
    if excluded > 0 {
        return Err(Error::InvalidParameter(format!("{excluded} true frames are identically zero")));
    }
    Ok(value)
}

/// TNMSE over the frames whose true signal is nonzero, with the number of
/// frames skipped. Errors when no frame is usable.
pub fn tnmse_excluding_empty(truth: &[Vec<C64>], estimate: &[Vec<C64>]) -> Result<(f64, usize)> {
    if truth.len() != estimate.len() || truth.iter().zip(estimate).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::Dimension("truth and estimate shapes differ".into()));
    }
    let mut sum = 0.0;
    let mut used = 0usize;
    for (x, xh) in truth.iter().zip(estimate) {
        let energy = norm_sqr(x);
        if energy > 0.0 {
            sum += dist_sqr(x, xh) / energy;
            used += 1;
        }
    }
    if used == 0 {
        return Err(Error::InvalidParameter("every true frame is identically zero".into()));
    }
    Ok((sum / used as f64, truth.len() - used))
}

pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Independent AMP per frame under the stationary spike-and-slab prior,
/// ignoring all temporal structure.
pub fn run_bg_amp(data: &DynamicDataset, params: &ModelParams, config: &SolverConfig) -> Result<PosteriorEstimates> {
    params.validate()?;
    config.validate()?;
    let sigma2 = params.sigma2();
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter("BG-AMP needs a positive amplitude variance".into()));
    }
    let prior = LocalPrior::new(params.lambda, params.zeta, sigma2)?;
    let priors = vec![prior; data.dims.n];
    let amp_cfg = crate::ampcore::AmpConfig {
        max_iters: config.max_inner_iters,
        stop_tol: config.stop_tol,
        damping: config.damping,
        infinite_variance_fill: sigma2,
        ..Default::default()
    };
    let mut x_mean = Vec::with_capacity(data.dims.t);
    let mut x_var = Vec::with_capacity(data.dims.t);
    for t in 0..data.dims.t {
        let st = amp_frame(&data.y[t], data.operator(t), &priors, params.sigma_e2, &amp_cfg)?;
        x_mean.push(st.mu);
        x_var.push(st.v);
    }
    Ok(PosteriorEstimates::from_means(x_mean, x_var))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "sks")]
    Sks,
    #[serde(rename = "dcs-amp")]
    DcsAmp,
    #[serde(rename = "em-dcs-amp")]
    EmDcsAmp,
    #[serde(rename = "bg-amp")]
    BgAmp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Sks, Algorithm::DcsAmp, Algorithm::EmDcsAmp, Algorithm::BgAmp];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Sks => "sks",
            Algorithm::DcsAmp => "dcs-amp",
            Algorithm::EmDcsAmp => "em-dcs-amp",
            Algorithm::BgAmp => "bg-amp",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown algorithm '{s}'")))
    }
}

/// How EM-DCS-AMP picks its starting parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmInit {
    /// Data-driven heuristics only.
    Heuristic,
    /// The generating parameters with `lambda` and `rho` rescaled.
    ScaledTruth { lambda_factor: f64, rho_factor: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub solver: SolverConfig,
    pub em: EmConfig,
    pub em_init: EmInit,
    pub sks_max_iters: usize,
    pub sks_tol: f64,
    /// Worker threads for trials; 0 uses all cores.
    pub jobs: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            em: EmConfig { max_iters: 50, ..EmConfig::default() },
            em_init: EmInit::Heuristic,
            sks_max_iters: 2000,
            sks_tol: 1e-10,
            jobs: 0,
        }
    }
}

/// Sparsity-undersampling plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub delta_values: Vec<f64>,
    pub beta_values: Vec<f64>,
    pub n: usize,
    pub t: usize,
    pub trials: usize,
    pub snr_db: f64,
    pub p01: f64,
    pub alpha: f64,
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self {
            delta_values: vec![0.1, 0.2, 0.35, 0.5],
            beta_values: vec![0.3, 0.5, 0.7, 0.9],
            n: 512,
            t: 25,
            trials: 100,
            snr_db: 25.0,
            p01: 0.05,
            alpha: 0.01,
            sigma2: 1.0,
            seed: 0,
        }
    }
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        if let Some(d) = self.delta_values.iter().find(|d| !(**d > 0.0 && **d <= 1.0)) {
            return Err(Error::InvalidParameter(format!("delta={d} not in (0,1]")));
        }
        if let Some(b) = self.beta_values.iter().find(|b| !(**b > 0.0)) {
            return Err(Error::InvalidParameter(format!("beta={b} must be positive")));
        }
        Dims::new(self.n, 1, self.t)?;
        if self.trials == 0 {
            return Err(Error::InvalidParameter("need at least one trial".into()));
        }
        Ok(())
    }
}

/// Dynamics plane at a fixed `(delta, beta)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsGrid {
    pub p01_values: Vec<f64>,
    pub alpha_values: Vec<f64>,
    pub delta: f64,
    pub beta: f64,
    pub n: usize,
    pub t: usize,
    pub trials: usize,
    pub snr_db: f64,
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for DynamicsGrid {
    fn default() -> Self {
        let alphas = (0..5).map(|i| 10f64.powf(-3.0 + i as f64 * (0.95f64.log10() + 3.0) / 4.0)).collect();
        Self {
            p01_values: vec![0.0, 0.05, 0.1, 0.15],
            alpha_values: alphas,
            delta: 1.0 / 3.0,
            beta: 0.45,
            n: 512,
            t: 25,
            trials: 100,
            snr_db: 25.0,
            sigma2: 1.0,
            seed: 0,
        }
    }
}

impl DynamicsGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) || !(self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!("bad (delta, beta) = ({}, {})", self.delta, self.beta)));
        }
        if let Some(p) = self.p01_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidParameter(format!("p01={p} not in [0,1]")));
        }
        if let Some(a) = self.alpha_values.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
            return Err(Error::InvalidParameter(format!("alpha={a} not in (0,1]")));
        }
        Dims::new(self.n, 1, self.t)?;
        if self.trials == 0 {
            return Err(Error::InvalidParameter("need at least one trial".into()));
        }
        Ok(())
    }
}

/// Aggregated results for one algorithm in one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub x: f64,
    pub y: f64,
    pub algorithm: Algorithm,
    pub tnmse_db_mean: f64,
    pub tnmse_db_median: f64,
    pub tnmse_db_std: f64,
    pub runtime_s: f64,
    pub trials: usize,
    /// Trials that failed numerically and are left out of the statistics.
    pub failed_trials: usize,
    /// Frames with an all-zero true signal, left out of TNMSE.
    pub excluded_frames: usize,
    /// Per-trial TNMSE in dB, in trial order.
    pub tnmse_db: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub x: f64,
    pub y: f64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    /// Column names of the two cell coordinates.
    pub x_name: String,
    pub y_name: String,
    pub rows: Vec<ResultRow>,
    pub skipped: Vec<SkippedCell>,
    /// Full configuration echo.
    pub config: serde_json::Value,
}

impl ResultTable {
    pub fn empty(x_name: &str, y_name: &str) -> Self {
        Self {
            x_name: x_name.into(),
            y_name: y_name.into(),
            rows: Vec::new(),
            skipped: Vec::new(),
            config: serde_json::Value::Null,
        }
    }

    pub fn row(&self, x: f64, y: f64, algorithm: Algorithm) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.x == x && r.y == y && r.algorithm == algorithm)
    }
}

/// Outcome of one algorithm on one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialResult {
    pub algorithm: Algorithm,
    pub tnmse_db: Option<f64>,
    pub runtime_s: f64,
    pub excluded_frames: usize,
}

/// Generates one synthetic dataset and runs each requested algorithm on it.
pub fn run_trial(
    params: &ModelParams,
    dims: Dims,
    snr_db: f64,
    seed: u64,
    algorithms: &[Algorithm],
    config: &HarnessConfig,
) -> Result<Vec<TrialResult>> {
    let data =
        generate_synthetic_with(params, dims, GenerateOptions { time_invariant: false, snr_db: Some(snr_db) }, seed)?;
    let truth = data.truth.as_ref().expect("synthetic data has truth");
    let true_params = data.params.unwrap_or(*params);
    let mut out = Vec::with_capacity(algorithms.len());
    for &alg in algorithms {
        let start = Instant::now();
        let estimate = match alg {
            Algorithm::Sks => OracleProblem::from_truth(&data, true_params)
                .and_then(|p| sks_estimate_cg(&p, config.sks_max_iters, config.sks_tol)),
            Algorithm::DcsAmp => smooth(&data, &true_params, &config.solver),
            Algorithm::BgAmp => run_bg_amp(&data, &true_params, &config.solver),
            Algorithm::EmDcsAmp => {
                let init = match config.em_init {
                    EmInit::Heuristic => init_heuristics(&data),
                    EmInit::ScaledTruth { lambda_factor, rho_factor } => {
                        let lambda = (true_params.lambda * lambda_factor).clamp(0.0, 1.0);
                        let p = ModelParams {
                            lambda,
                            p01: true_params.p01.min(if lambda > 0.0 { (1.0 - lambda) / lambda } else { 1.0 }),
                            rho: true_params.rho * rho_factor,
                            ..true_params
                        };
                        p.validate().map(|_| p)
                    }
                };
                let em_cfg = EmConfig { solver: config.solver, ..config.em };
                init.and_then(|p| em_loop(&data, &p, &em_cfg)).map(|o| o.posteriors)
            }
        };
        let runtime_s = start.elapsed().as_secs_f64();
        let (tnmse_db, excluded_frames) = match estimate {
            Ok(est) => {
                let (v, ex) = tnmse_excluding_empty(&truth.x, &est.x_mean)?;
                (Some(to_db(v)), ex)
            }
            Err(e) if e.is_numerical() => {
                log::warn!("{} failed on seed {seed}: {e}", alg.name());
                (None, 0)
            }
            Err(e) => return Err(e),
        };
        out.push(TrialResult { algorithm: alg, tnmse_db, runtime_s, excluded_frames });
    }
    Ok(out)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

fn aggregate(x: f64, y: f64, algorithm: Algorithm, trials: &[Vec<TrialResult>]) -> ResultRow {
    let results: Vec<&TrialResult> = trials.iter().flatten().filter(|r| r.algorithm == algorithm).collect();
    let values: Vec<f64> = results.iter().filter_map(|r| r.tnmse_db).collect();
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    ResultRow {
        x,
        y,
        algorithm,
        tnmse_db_mean: mean,
        tnmse_db_median: median(&values),
        tnmse_db_std: std,
        runtime_s: results.iter().map(|r| r.runtime_s).sum::<f64>() / results.len().max(1) as f64,
        trials: results.len(),
        failed_trials: results.len() - values.len(),
        excluded_frames: results.iter().map(|r| r.excluded_frames).sum(),
        tnmse_db: values,
    }
}

struct CellSpec {
    x: f64,
    y: f64,
    params: std::result::Result<ModelParams, String>,
    dims: Dims,
}

fn run_cells(
    cells: Vec<CellSpec>,
    trials: usize,
    snr_db: f64,
    seed: u64,
    algorithms: &[Algorithm],
    config: &HarnessConfig,
    mut table: ResultTable,
) -> Result<ResultTable> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;
    for (ci, cell) in cells.iter().enumerate() {
        let params = match &cell.params {
            Ok(p) => p,
            Err(reason) => {
                table.skipped.push(SkippedCell { x: cell.x, y: cell.y, reason: reason.clone() });
                continue;
            }
        };
        let cell_seed = mix_seed(seed, ci as u64);
        let results: Vec<Vec<TrialResult>> = pool.install(|| {
            (0..trials)
                .into_par_iter()
                .map(|k| run_trial(params, cell.dims, snr_db, mix_seed(cell_seed, k as u64), algorithms, config))
                .collect::<Result<Vec<_>>>()
        })?;
        for &alg in algorithms {
            table.rows.push(aggregate(cell.x, cell.y, alg, &results));
        }
    }
    Ok(table)
}

fn cell_params(lambda: f64, p01: f64, alpha: f64, sigma2: f64) -> std::result::Result<ModelParams, String> {
    if lambda > 1.0 {
        return Err(format!("lambda={lambda} exceeds 1"));
    }
    ModelParams::from_variance(lambda, p01, C64::new(0.0, 0.0), alpha, sigma2, 1.0).map_err(|e| e.to_string())
}

/// Sweeps the `(delta, beta)` plane; `M = ceil(delta N)`, `lambda = beta delta`.
pub fn run_phase_plane(grid: &ExperimentGrid, algorithms: &[Algorithm], config: &HarnessConfig) -> Result<ResultTable> {
    grid.validate()?;
    let mut cells = Vec::new();
    for &delta in &grid.delta_values {
        for &beta in &grid.beta_values {
            let m = (delta * grid.n as f64).ceil() as usize;
            cells.push(CellSpec {
                x: delta,
                y: beta,
                params: cell_params(beta * delta, grid.p01, grid.alpha, grid.sigma2),
                dims: Dims::new(grid.n, m, grid.t)?,
            });
        }
    }
    let mut table = ResultTable::empty("delta", "beta");
    table.config = serde_json::json!({
        "suite": "phase-plane",
        "grid": grid,
        "algorithms": algorithms,
        "harness": config,
        "version": crate::VERSION,
    });
    run_cells(cells, grid.trials, grid.snr_db, grid.seed, algorithms, config, table)
}

/// Sweeps `(p01, alpha)` at a fixed `(delta, beta)`.
pub fn run_dynamics_plane(
    grid: &DynamicsGrid,
    algorithms: &[Algorithm],
    config: &HarnessConfig,
) -> Result<ResultTable> {
    grid.validate()?;
    let m = (grid.delta * grid.n as f64).ceil() as usize;
    let lambda = grid.beta * grid.delta;
    let mut cells = Vec::new();
    for &p01 in &grid.p01_values {
        for &alpha in &grid.alpha_values {
            cells.push(CellSpec {
                x: p01,
                y: alpha,
                params: cell_params(lambda, p01, alpha, grid.sigma2),
                dims: Dims::new(grid.n, m, grid.t)?,
            });
        }
    }
    let mut table = ResultTable::empty("p01", "alpha");
    table.config = serde_json::json!({
        "suite": "dynamics",
        "grid": grid,
        "algorithms": algorithms,
        "harness": config,
        "version": crate::VERSION,
    });
    run_cells(cells, grid.trials, grid.snr_db, grid.seed, algorithms, config, table)
}

/// `%.6g`-style formatting, independent of locale.
pub fn fmt_sig6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    // rounding can bump the exponent, so take it from the scientific form
    let sci = format!("{:.5e}", x);
    let (mantissa, e) = sci.split_once('e').expect("scientific format");
    let e: i32 = e.parse().expect("exponent");
    if (-4..6).contains(&e) {
        let decimals = (5 - e).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa.to_string()), if e < 0 { '-' } else { '+' }, e.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// CSV rendering. With `timing = false` the runtime column is left empty so
/// that repeated runs produce identical bytes.
pub fn to_csv(table: &ResultTable, timing: bool) -> String {
    let mut out = format!(
        "{},{},algorithm,tnmse_db_mean,tnmse_db_median,tnmse_db_std,runtime_s,trials\n",
        table.x_name, table.y_name
    );
    for r in &table.rows {
        let runtime = if timing { fmt_sig6(r.runtime_s) } else { String::new() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            fmt_sig6(r.x),
            fmt_sig6(r.y),
            r.algorithm.name(),
            fmt_sig6(r.tnmse_db_mean),
            fmt_sig6(r.tnmse_db_median),
            fmt_sig6(r.tnmse_db_std),
            runtime,
            r.trials
        );
    }
    out
}

pub fn to_json(table: &ResultTable) -> Result<String> {
    Ok(serde_json::to_string_pretty(table)?)
}

pub fn from_json(s: &str) -> Result<ResultTable> {
    Ok(serde_json::from_str(s)?)
}

/// Writes the table to `path` in the requested format.
pub fn emit_results(table: &ResultTable, path: &Path, format: OutputFormat, timing: bool) -> Result<()> {
    let body = match format {
        OutputFormat::Csv => to_csv(table, timing),
        OutputFormat::Json => {
            if timing {
                to_json(table)?
            } else {
                let mut t = table.clone();
                t.rows.iter_mut().for_each(|r| r.runtime_s = 0.0);
                to_json(&t)?
            }
        }
    };
    std::fs::write(path, body)?;
    Ok(())
}
