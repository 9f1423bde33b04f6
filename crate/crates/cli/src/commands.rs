//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dyncs::em::{filter_em, EmTrace};
use dyncs::harness::{self, Algorithm, OutputFormat, ResultTable};
use dyncs::io;
use dyncs::model::{generate_synthetic_with, perturbation_variance, GenerateOptions};
use dyncs::oracle::{skf_estimate, sks_estimate, sks_estimate_cg, OracleProblem};
use dyncs::{
    em_loop, filter, init_heuristics, smooth, Dims, DynamicDataset, EmConfig, Mode, ModelParams, PosteriorEstimates,
    SolverConfig, C64,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{merge, resolve_seed};
use crate::{
    CliError, DynamicsArgs, EmInitArg, FormatArg, GenerateArgs, ModeArg, ModelFlags, OracleArgs, PhasePlaneArgs,
    RecoverArgs, SksMethod, SolverFlags, SuiteFlags,
};

fn required<T: Copy>(value: Option<T>, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required flag --{flag}")))
}

fn required_path(value: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    value.clone().ok_or_else(|| CliError::Usage(format!("missing {what}")))
}

/// Header written into every output JSON.
fn provenance(command: &str, config: &impl Serialize) -> Result<Value, CliError> {
    Ok(json!({
        "version": dyncs::VERSION,
        "command": command,
        "config": config,
    }))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

impl SolverFlags {
    fn fill(&mut self, base: &SolverConfig) {
        self.passes.get_or_insert(base.passes);
        self.inner_iters.get_or_insert(base.max_inner_iters);
        self.stop_tol.get_or_insert(base.stop_tol);
        self.epsilon.get_or_insert(base.epsilon);
        self.tau.get_or_insert(base.tau);
        self.taylor_switch.get_or_insert(base.taylor_switch_p01);
        self.warm_start.get_or_insert(base.warm_start);
    }

    fn to_config(&self, mode: Mode) -> Result<SolverConfig, CliError> {
        let d = SolverConfig::default();
        let cfg = SolverConfig {
            mode,
            passes: self.passes.unwrap_or(d.passes),
            max_inner_iters: self.inner_iters.unwrap_or(d.max_inner_iters),
            stop_tol: self.stop_tol.unwrap_or(d.stop_tol),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            tau: self.tau.unwrap_or(d.tau),
            taylor_switch_p01: self.taylor_switch.unwrap_or(d.taylor_switch_p01),
            damping: self.damping.or(d.damping),
            warm_start: self.warm_start.unwrap_or(d.warm_start),
            pass_tol: d.pass_tol,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl ModelFlags {
    fn is_empty(&self) -> bool {
        serde_json::to_value(self)
            .map(|v| v.as_object().is_some_and(|m| m.values().all(Value::is_null)))
            .unwrap_or(true)
    }

    /// Applies the given flags on top of `base`.
    fn apply(&self, base: ModelParams) -> Result<ModelParams, CliError> {
        let mut p = base;
        if let Some(v) = self.lambda {
            p.lambda = v;
        }
        if let Some(v) = self.p01 {
            p.p01 = v;
        }
        if let Some(v) = self.alpha {
            p.alpha = v;
        }
        if self.zeta_re.is_some() || self.zeta_im.is_some() {
            p.zeta = C64::new(self.zeta_re.unwrap_or(p.zeta.re), self.zeta_im.unwrap_or(p.zeta.im));
        }
        if let Some(v) = self.rho {
            p.rho = v;
        } else if let Some(s2) = self.sigma2 {
            p.rho = perturbation_variance(p.alpha, s2)?;
        } else if self.alpha.is_some() && p.alpha < 1.0 {
            // keep the stationary variance when only alpha changes
            p.rho = perturbation_variance(p.alpha, base.sigma2())?;
        }
        if let Some(v) = self.sigma_e2 {
            p.sigma_e2 = v;
        }
        p.validate()?;
        Ok(p)
    }
}

pub fn generate(cli: &GenerateArgs) -> Result<(), CliError> {
    let mut a = merge(cli, cli.config.as_deref())?;
    let n = required(a.n, "n")?;
    let m = required(a.m, "m")?;
    let t = required(a.t, "t")?;
    let out = required_path(&a.output, "output directory (-o)")?;
    if a.snr_db.is_some() && a.model.sigma_e2.is_some() {
        return Err(CliError::Usage("--snr-db and --sigma-e2 are mutually exclusive".into()));
    }
    if a.snr_db.is_none() && a.model.sigma_e2.is_none() {
        a.snr_db = Some(25.0);
    }
    let md = &mut a.model;
    md.lambda.get_or_insert(0.1);
    md.p01.get_or_insert(0.05);
    md.alpha.get_or_insert(0.01);
    md.zeta_re.get_or_insert(0.0);
    md.zeta_im.get_or_insert(0.0);
    if md.rho.is_none() {
        md.sigma2.get_or_insert(1.0);
    }
    a.time_invariant.get_or_insert(false);
    a.seed = Some(resolve_seed(a.seed)?);

    let md = &a.model;
    let zeta = C64::new(md.zeta_re.unwrap_or(0.0), md.zeta_im.unwrap_or(0.0));
    let sigma_e2 = md.sigma_e2.unwrap_or(1.0);
    let (lambda, p01, alpha) = (md.lambda.unwrap_or(0.1), md.p01.unwrap_or(0.05), md.alpha.unwrap_or(0.01));
    let params = match md.rho {
        Some(rho) => {
            let p = ModelParams { lambda, p01, zeta, alpha, rho, sigma_e2 };
            p.validate()?;
            p
        }
        None => ModelParams::from_variance(lambda, p01, zeta, alpha, md.sigma2.unwrap_or(1.0), sigma_e2)?,
    };
    let dims = Dims::new(n, m, t)?;
    let options = GenerateOptions { time_invariant: a.time_invariant == Some(true), snr_db: a.snr_db };
    let seed = a.seed.unwrap_or(0);
    let data = generate_synthetic_with(&params, dims, options, seed)?;
    io::write_dataset_with_config(&data, &out, Some(provenance("generate", &a)?))?;
    log::info!("wrote {} ({}x{}x{}, seed {seed})", out.display(), n, m, t);
    Ok(())
}

fn read_data(path: &Option<PathBuf>) -> Result<DynamicDataset, CliError> {
    let dir = required_path(path, "dataset directory")?;
    Ok(io::read_dataset(&dir)?)
}

/// TNMSE against the stored truth, skipping frames with no energy.
fn score(data: &DynamicDataset, post: &PosteriorEstimates) -> Result<(Option<f64>, usize), CliError> {
    match &data.truth {
        Some(truth) => {
            let (v, excluded) = harness::tnmse_excluding_empty(&truth.x, &post.x_mean)?;
            Ok((Some(harness::to_db(v)), excluded))
        }
        None => Ok((None, 0)),
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    #[serde(flatten)]
    header: Value,
    params: ModelParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    learned_params: Option<ModelParams>,
    #[serde(skip_serializing_if = "Option::is_none")]
    em_trace: Option<&'a EmTrace>,
    tnmse_db: Option<f64>,
    excluded_frames: usize,
}

fn finish(out: &Option<PathBuf>, header: Value, post: &PosteriorEstimates, summary: &Summary) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(summary)?;
    if let Some(dir) = out {
        io::write_posteriors_with_config(post, dir, Some(header))?;
        fs::write(dir.join("summary.json"), text.clone() + "\n")?;
    }
    print_stdout(&(text + "\n"))
}

/// Writes to stdout, treating a closed pipe as success.
fn print_stdout(s: &str) -> Result<(), CliError> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(s.as_bytes()).and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

pub fn recover(cli: &RecoverArgs) -> Result<(), CliError> {
    let mut a = merge(cli, cli.config.as_deref())?;
    let data = read_data(&a.data)?;
    let mode = *a.mode.get_or_insert(ModeArg::Smooth);
    let em = *a.em.get_or_insert(false);
    let mode = match mode {
        ModeArg::Filter => Mode::Filter,
        ModeArg::Smooth => Mode::Smooth,
    };
    let mut defaults = SolverConfig::default();
    if mode == Mode::Filter {
        defaults.passes = 1;
    }
    a.solver.fill(&defaults);
    let solver = a.solver.to_config(mode)?;
    if em {
        a.em_iters.get_or_insert(50);
        a.em_tol.get_or_insert(EmConfig::default().rel_tol);
        a.em_init.get_or_insert(EmInitArg::Heuristic);
        a.em_warmup.get_or_insert(2);
    }

    let base = match (em, a.em_init, data.params) {
        (true, Some(EmInitArg::Heuristic), _) => init_heuristics(&data)?,
        (_, _, Some(p)) => p,
        (_, _, None) => {
            log::warn!("dataset stores no model parameters; using data-driven estimates");
            init_heuristics(&data)?
        }
    };
    let params = a.model.apply(base)?;
    let header = provenance("recover", &a)?;

    let started = Instant::now();
    let (post, learned, trace) = if em {
        let outcome = match mode {
            Mode::Smooth => {
                let cfg = EmConfig {
                    max_iters: a.em_iters.unwrap_or(50),
                    rel_tol: a.em_tol.unwrap_or(1e-5),
                    solver,
                    ..EmConfig::default()
                };
                em_loop(&data, &params, &cfg)?
            }
            Mode::Filter => filter_em(&data, &params, &solver, a.em_warmup.unwrap_or(2))?,
        };
        (outcome.posteriors, Some(outcome.params), Some(outcome.trace))
    } else {
        let post = match mode {
            Mode::Filter => filter(&data, &params, &solver)?,
            Mode::Smooth => smooth(&data, &params, &solver)?,
        };
        (post, None, None)
    };
    log::info!("recovery took {:.3} s", started.elapsed().as_secs_f64());

    let (tnmse_db, excluded_frames) = score(&data, &post)?;
    let summary = Summary {
        header: header.clone(),
        params,
        learned_params: learned,
        em_trace: trace.as_ref(),
        tnmse_db,
        excluded_frames,
    };
    finish(&a.output, header, &post, &summary)
}

pub fn oracle(cli: &OracleArgs, smoother: bool) -> Result<(), CliError> {
    let mut a = merge(cli, cli.config.as_deref())?;
    let data = read_data(&a.data)?;
    let base = match data.params {
        Some(p) => p,
        None if !a.model.is_empty() => init_heuristics(&data)?,
        None => return Err(CliError::Usage("dataset stores no model parameters; pass them as flags".into())),
    };
    let params = a.model.apply(base)?;
    let problem = OracleProblem::from_truth(&data, params)?;
    let command = if smoother { "sks" } else { "skf" };
    let post = if smoother {
        let max_iters = *a.max_iters.get_or_insert(2000);
        let tol = *a.tol.get_or_insert(1e-10);
        match *a.method.get_or_insert(SksMethod::Bp) {
            SksMethod::Bp => sks_estimate(&problem, max_iters, tol)?,
            SksMethod::Cg => sks_estimate_cg(&problem, max_iters, tol)?,
        }
    } else {
        skf_estimate(&problem)?
    };
    let header = provenance(command, &a)?;
    let (tnmse_db, excluded_frames) = score(&data, &post)?;
    let summary =
        Summary { header: header.clone(), params, learned_params: None, em_trace: None, tnmse_db, excluded_frames };
    finish(&a.output, header, &post, &summary)
}

fn parse_algorithms(names: &[String]) -> Result<Vec<Algorithm>, CliError> {
    names.iter().map(|s| Algorithm::parse(s.trim()).map_err(|e| CliError::Usage(e.to_string()))).collect()
}

/// Fills defaults in the shared suite flags and builds the harness configuration.
fn suite_setup(s: &mut SuiteFlags) -> Result<(Vec<Algorithm>, harness::HarnessConfig), CliError> {
    let algorithms =
        s.algorithms.get_or_insert_with(|| Algorithm::ALL.iter().map(|a| a.name().to_string()).collect()).clone();
    let algorithms = parse_algorithms(&algorithms)?;
    s.seed = Some(resolve_seed(s.seed)?);
    s.jobs.get_or_insert(0);
    s.format.get_or_insert(FormatArg::Csv);
    s.no_timing.get_or_insert(false);
    s.solver.fill(&SolverConfig::default());
    let mut cfg = harness::HarnessConfig::default();
    s.em_iters.get_or_insert(cfg.em.max_iters);
    cfg.solver = s.solver.to_config(Mode::Smooth)?;
    cfg.em.max_iters = s.em_iters.unwrap_or(cfg.em.max_iters);
    cfg.em.solver = cfg.solver;
    cfg.jobs = s.jobs.unwrap_or(0);
    Ok((algorithms, cfg))
}

fn emit(mut table: ResultTable, s: &SuiteFlags, header: Value) -> Result<(), CliError> {
    table.config["cli"] = header;
    let timing = s.no_timing != Some(true);
    let format = match s.format {
        Some(FormatArg::Json) => OutputFormat::Json,
        _ => OutputFormat::Csv,
    };
    match &s.output {
        Some(path) => {
            harness::emit_results(&table, path, format, timing)?;
            if format == OutputFormat::Csv {
                // CSV carries no metadata, so keep the configuration alongside it
                let mut side = path.clone().into_os_string();
                side.push(".json");
                write_json(Path::new(&side), &table.config)?;
            }
        }
        None => {
            let mut t = table;
            if !timing {
                t.rows.iter_mut().for_each(|r| r.runtime_s = 0.0);
            }
            match format {
                OutputFormat::Csv => print_stdout(&harness::to_csv(&t, timing))?,
                OutputFormat::Json => print_stdout(&(harness::to_json(&t)? + "\n"))?,
            }
        }
    }
    Ok(())
}

pub fn phase_plane(cli: &PhasePlaneArgs) -> Result<(), CliError> {
    let mut a = merge(cli, cli.config.as_deref())?;
    let d = harness::ExperimentGrid::default();
    let (algorithms, cfg) = suite_setup(&mut a.suite)?;
    let seed = a.suite.seed.unwrap_or(0);
    let grid = harness::ExperimentGrid {
        delta_values: a.delta.get_or_insert(d.delta_values).clone(),
        beta_values: a.beta.get_or_insert(d.beta_values).clone(),
        n: *a.suite.n.get_or_insert(d.n),
        t: *a.suite.t.get_or_insert(d.t),
        trials: *a.suite.trials.get_or_insert(d.trials),
        snr_db: *a.suite.snr_db.get_or_insert(d.snr_db),
        p01: *a.p01.get_or_insert(d.p01),
        alpha: *a.alpha.get_or_insert(d.alpha),
        sigma2: *a.suite.sigma2.get_or_insert(d.sigma2),
        seed,
    };
    let header = provenance("phase-plane", &a)?;
    let table = harness::run_phase_plane(&grid, &algorithms, &cfg)?;
    emit(table, &a.suite, header)
}

pub fn dynamics(cli: &DynamicsArgs) -> Result<(), CliError> {
    let mut a = merge(cli, cli.config.as_deref())?;
    let d = harness::DynamicsGrid::default();
    let (algorithms, cfg) = suite_setup(&mut a.suite)?;
    let seed = a.suite.seed.unwrap_or(0);
    let grid = harness::DynamicsGrid {
        p01_values: a.p01.get_or_insert(d.p01_values).clone(),
        alpha_values: a.alpha.get_or_insert(d.alpha_values).clone(),
        delta: *a.delta.get_or_insert(d.delta),
        beta: *a.beta.get_or_insert(d.beta),
        n: *a.suite.n.get_or_insert(d.n),
        t: *a.suite.t.get_or_insert(d.t),
        trials: *a.suite.trials.get_or_insert(d.trials),
        snr_db: *a.suite.snr_db.get_or_insert(d.snr_db),
        sigma2: *a.suite.sigma2.get_or_insert(d.sigma2),
        seed,
    };
    let header = provenance("dynamics", &a)?;
    let table = harness::run_dynamics_plane(&grid, &algorithms, &cfg)?;
    emit(table, &a.suite, header)
}
