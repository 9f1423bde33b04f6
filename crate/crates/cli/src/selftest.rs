//! Fast invariant checks runnable from the command line.

use dyncs::harness::{run_bg_amp, tnmse, to_db};
use dyncs::model::{generate_synthetic_with, GenerateOptions};
use dyncs::oracle::{exact_mmse_small, sks_estimate, sks_estimate_cg, OracleProblem};
use dyncs::{em_update, filter, generate_synthetic, smooth, Dims, ModelParams, SolverConfig, C64};

use crate::config::{merge, resolve_seed};
use crate::{CliError, SelftestArgs};

type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: dyncs::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn small_params() -> ModelParams {
    ModelParams::from_variance(0.3, 0.2, C64::new(0.2, -0.1), 0.3, 1.0, 0.05).expect("valid parameters")
}

fn dataset_invariants(seed: u64) -> Check {
    let p = ModelParams::from_variance(0.1, 0.05, C64::new(0.0, 0.0), 0.01, 1.0, 1.0).expect("valid");
    let data = lib(generate_synthetic_with(
        &p,
        lib(Dims::new(64, 24, 6))?,
        GenerateOptions { time_invariant: false, snr_db: Some(25.0) },
        seed,
    ))?;
    lib(data.validate())?;
    let again = lib(generate_synthetic_with(
        &p,
        data.dims,
        GenerateOptions { time_invariant: false, snr_db: Some(25.0) },
        seed,
    ))?;
    ensure(again.y == data.y, || "same seed produced different measurements".into())
}

fn smoother_matches_exact(seed: u64) -> Check {
    let p = small_params();
    let data = lib(generate_synthetic(&p, lib(Dims::new(5, 3, 4))?, seed))?;
    let problem = lib(OracleProblem::from_truth(&data, p))?;
    let exact = lib(exact_mmse_small(&problem))?;
    let bp = lib(sks_estimate(&problem, 5000, 1e-13))?;
    let cg = lib(sks_estimate_cg(&problem, 5000, 1e-14))?;
    for (t, row) in exact.x_mean.iter().enumerate() {
        for (n, v) in row.iter().enumerate() {
            let (e1, e2) = ((bp.x_mean[t][n] - v).norm(), (cg.x_mean[t][n] - v).norm());
            ensure(e1 < 1e-8 && e2 < 1e-8, || format!("frame {t} coefficient {n}: bp err {e1:e}, cg err {e2:e}"))?;
        }
    }
    Ok(())
}

fn probabilities_valid(seed: u64) -> Check {
    let p = ModelParams::from_variance(0.1, 0.05, C64::new(0.0, 0.0), 0.05, 1.0, 1.0).expect("valid");
    let data = lib(generate_synthetic_with(
        &p,
        lib(Dims::new(128, 48, 8))?,
        GenerateOptions { time_invariant: false, snr_db: Some(20.0) },
        seed,
    ))?;
    let mut p_true = p;
    p_true.sigma_e2 = data.params.map_or(1.0, |q| q.sigma_e2);
    let post = lib(smooth(&data, &p_true, &SolverConfig::default()))?;
    let ok = post.s_prob.iter().flatten().all(|v| (0.0..=1.0).contains(v))
        && post.x_mean.iter().flatten().all(|v| v.re.is_finite() && v.im.is_finite());
    ensure(ok, || "posterior probability outside [0,1] or non-finite mean".into())?;
    let truth = data.truth.as_ref().expect("synthetic truth");
    let db = to_db(lib(tnmse(&truth.x, &post.x_mean))?);
    ensure(db < -10.0, || format!("TNMSE {db:.2} dB on an easy problem"))?;
    let next = lib(em_update(&data, &post, &p_true))?;
    lib(next.validate())
}

fn single_frame_agreement(seed: u64) -> Check {
    let p = small_params();
    let data = lib(generate_synthetic(&p, lib(Dims::new(40, 20, 1))?, seed))?;
    let cfg = SolverConfig::default();
    let f = lib(filter(&data, &p, &cfg))?;
    let s = lib(smooth(&data, &p, &cfg))?;
    let b = lib(run_bg_amp(&data, &p, &cfg))?;
    let diff = f.max_mean_change(&s).max(f.max_mean_change(&b));
    ensure(diff < 1e-12, || format!("filter/smooth/BG-AMP differ by {diff:e}"))
}

type CheckFn = fn(u64) -> Check;

pub fn run(cli: &SelftestArgs) -> Result<(), CliError> {
    let a = merge(cli, cli.config.as_deref())?;
    let seed = resolve_seed(a.seed)?;
    let checks: [(&str, CheckFn); 4] = [
        ("dataset invariants and seeding", dataset_invariants),
        ("smoothers agree with exact posterior", smoother_matches_exact),
        ("DCS-AMP posteriors and EM update are valid", probabilities_valid),
        ("filter, smoother and BG-AMP agree on one frame", single_frame_agreement),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check(seed) {
            Ok(()) => println!("PASS  {name}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        return Err(CliError::Check(failed));
    }
    Ok(())
}
