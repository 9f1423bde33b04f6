use dyncs::io::{read_dataset, write_dataset};
use dyncs::model::{generate_synthetic_with, sample_signal, GenerateOptions};
use dyncs::{generate_synthetic, Dims, ModelParams, C64};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn params(lambda: f64, p01: f64, alpha: f64) -> ModelParams {
    ModelParams::from_variance(lambda, p01, C64::new(0.5, -0.25), alpha, 2.0, 1e-2).unwrap()
}

#[test]
fn active_runs_last_one_over_p01_on_average() {
    let p = params(0.3, 0.05, 0.1);
    let truth = sample_signal(&p, 1, 100_000, 5).unwrap();
    let s: Vec<bool> = truth.s.iter().map(|r| r[0]).collect();
    let (mut runs, mut len, mut total) = (0usize, 0usize, 0usize);
    // runs cut by either end of the record are biased short and skipped
    let mut started_inside = !s[0];
    for &on in &s {
        if on {
            len += 1;
        } else {
            if len > 0 && started_inside {
                runs += 1;
                total += len;
            }
            len = 0;
            started_inside = true;
        }
    }
    let mean = total as f64 / runs as f64;
    assert!(runs > 500, "only {runs} complete runs");
    assert!((mean * p.p01 - 1.0).abs() <= 0.1, "mean run {mean} vs {}", 1.0 / p.p01);
}

#[test]
fn activity_is_stationary_in_every_frame() {
    let (n, t, seeds) = (1000, 25, 8);
    let p = params(0.2, 0.1, 0.1);
    let mut counts = vec![0usize; t];
    for seed in 0..seeds {
        let truth = sample_signal(&p, n, t, seed).unwrap();
        for (c, row) in counts.iter_mut().zip(&truth.s) {
            *c += row.iter().filter(|&&on| on).count();
        }
    }
    // frames are correlated through the chain, so each is tested on its own
    // with a Bonferroni-corrected level
    let trials = (n * seeds as usize) as f64;
    let chi2 = ChiSquared::new(1.0).unwrap();
    for (k, &c) in counts.iter().enumerate() {
        let expected = trials * p.lambda;
        let sd = (trials * p.lambda * (1.0 - p.lambda)).sqrt();
        let stat = ((c as f64 - expected) / sd).powi(2);
        let pvalue = 1.0 - chi2.cdf(stat);
        assert!(pvalue > 1e-3 / t as f64, "frame {k}: {c} active of {trials}, p = {pvalue:.2e}");
    }

    let one = sample_signal(&p, n, t, 99).unwrap();
    for row in &one.s {
        let c = row.iter().filter(|&&on| on).count() as f64;
        let sd = (n as f64 * p.lambda * (1.0 - p.lambda)).sqrt();
        assert!((c - n as f64 * p.lambda).abs() <= 3.0 * sd + 1e-9, "{c} active of {n}");
    }
}

#[test]
fn amplitudes_keep_their_variance_and_lag_one_correlation() {
    let n = 20_000;
    for alpha in [0.05, 0.3, 1.0] {
        let p = params(0.1, 0.1, alpha);
        let truth = sample_signal(&p, n, 8, 17).unwrap();
        let centered: Vec<Vec<C64>> = truth.theta.iter().map(|r| r.iter().map(|v| v - p.zeta).collect()).collect();
        let sigma2 = p.sigma2();
        for row in &centered {
            let var = row.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
            // |CN(0, s2)|^2 is exponential, so the sample mean has sd s2/sqrt(N)
            assert!((var - sigma2).abs() <= 5.0 * sigma2 / (n as f64).sqrt(), "alpha {alpha}: var {var} vs {sigma2}");
        }
        for pair in centered.windows(2) {
            let cross: f64 = pair[0].iter().zip(&pair[1]).map(|(a, b)| (a.conj() * b).re).sum();
            let norm = (pair[0].iter().map(|v| v.norm_sqr()).sum::<f64>()
                * pair[1].iter().map(|v| v.norm_sqr()).sum::<f64>())
            .sqrt();
            let corr = cross / norm;
            assert!((corr - (1.0 - alpha)).abs() < 0.02, "alpha {alpha}: lag-1 correlation {corr}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn signal_is_support_times_amplitude_and_columns_are_unit(
        n in 1usize..40, m in 1usize..20, t in 1usize..6,
        lambda in 0.0..0.9f64, p01 in 0.0..1.0f64, alpha in 0.0..=1.0f64,
        invariant in any::<bool>(), seed in any::<u64>(),
    ) {
        let p01 = p01.min((1.0 - lambda) / lambda.max(1e-12));
        let p = ModelParams { lambda, p01, zeta: C64::new(0.1, 0.2), alpha, rho: 1.5, sigma_e2: 0.1 };
        let data = generate_synthetic_with(
            &p, Dims::new(n, m, t).unwrap(), GenerateOptions { time_invariant: invariant, snr_db: None }, seed,
        ).unwrap();
        let truth = data.truth.as_ref().unwrap();
        for k in 0..t {
            for i in 0..n {
                let expected = if truth.s[k][i] { truth.theta[k][i] } else { C64::new(0.0, 0.0) };
                prop_assert_eq!(truth.x[k][i], expected);
            }
            let a = data.operator(k);
            for norm in a.column_norms() {
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn datasets_survive_a_file_round_trip(n in 1usize..12, m in 1usize..8, t in 1usize..4, seed in any::<u64>()) {
        let data = generate_synthetic(&params(0.3, 0.2, 0.4), Dims::new(n, m, t).unwrap(), seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&data, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        prop_assert_eq!(&back.y, &data.y);
        prop_assert_eq!(&back.truth, &data.truth);
        prop_assert_eq!(back.params, data.params);
        prop_assert_eq!(back.dims, data.dims);
        for k in 0..t {
            prop_assert_eq!(back.operator(k), data.operator(k));
        }
    }
}
