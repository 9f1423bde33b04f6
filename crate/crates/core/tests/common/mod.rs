//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use dyncs::ampcore::AmpFrameState;
use dyncs::em::collect_posteriors;
use dyncs::model::{complex_normal, rng_stream, sample_signal, Operators};
use dyncs::scheduler::MessageState;
use dyncs::{DenseMatrix, DynamicDataset, ModelParams, PosteriorEstimates, SolverConfig, C64};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Random denoiser inputs with `phi` drawn from the model they describe.
pub fn random_case(rng: &mut ChaCha8Rng) -> (C64, f64, f64, C64, f64) {
    let c = 10f64.powf(rng.gen_range(-2.0..0.7));
    let psi = 10f64.powf(rng.gen_range(-1.3..0.7));
    let pi = rng.gen_range(0.0..1.0);
    let xi = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let normal = |rng: &mut ChaCha8Rng, v: f64| {
        let (a, b): (f64, f64) = (rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal));
        C64::new(a, b) * (v / 2.0).sqrt()
    };
    let x = if rng.gen_bool(pi) { xi + normal(rng, psi) } else { C64::new(0.0, 0.0) };
    (x + normal(rng, c), c, pi, xi, psi)
}

/// Gauss-Hermite rule for the weight `exp(-u^2)` (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi =
        DMatrix::from_fn(n, n, |i, j| if i + 1 == j || j + 1 == i { (i.max(j) as f64 / 2.0).sqrt() } else { 0.0 });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|k| (eig.eigenvalues[k], std::f64::consts::PI.sqrt() * eig.eigenvectors[(0, k)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn log_cn(x: C64, mean: C64, var: f64) -> f64 {
    -(x - mean).norm_sqr() / var - (std::f64::consts::PI * var).ln()
}

/// Posterior mean and variance of `x` given `phi = x + CN(0, c)` under the
/// prior `(1 - pi) delta(x) + pi CN(xi, psi)`, by tensor Gauss-Hermite
/// quadrature of the slab part against the narrower of its two Gaussians.
pub fn quadrature_posterior(phi: C64, c: f64, pi: f64, xi: C64, psi: f64, rule: &(Vec<f64>, Vec<f64>)) -> (C64, f64) {
    let (nodes, weights) = rule;
    let (center, scale, prior_is_measure) = if psi <= c { (xi, psi, true) } else { (phi, c, false) };
    let mut points = Vec::with_capacity(nodes.len() * nodes.len() + 1);
    for (u, wu) in nodes.iter().zip(weights) {
        for (v, wv) in nodes.iter().zip(weights) {
            let x = center + C64::new(*u, *v) * scale.sqrt();
            // the measure's density cancels against exp(-u^2 - v^2)/(pi scale)
            let other = if prior_is_measure { log_cn(phi, x, c) } else { log_cn(x, xi, psi) };
            let lw = (wu * wv / std::f64::consts::PI).ln() + other + pi.ln();
            points.push((x, lw));
        }
    }
    points.push((C64::new(0.0, 0.0), (1.0 - pi).ln() + log_cn(phi, C64::new(0.0, 0.0), c)));
    let shift = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut m1) = (0.0, C64::new(0.0, 0.0));
    for (x, lw) in &points {
        let w = (lw - shift).exp();
        z += w;
        m1 += x * w;
    }
    let mean = m1 / z;
    let var = points.iter().map(|(x, lw)| (lw - shift).exp() * (x - mean).norm_sqr()).sum::<f64>() / z;
    (mean, var)
}

/// Exact support posteriors by enumerating all `2^(N T)` support patterns.
pub struct Enumeration {
    pub s_prob: Vec<Vec<f64>>,
    /// `Pr{s(t) = 1, s(t+1) = 1 | y}`
    pub s_pair: Vec<Vec<f64>>,
}

pub fn enumerate_support(data: &DynamicDataset, p: &ModelParams) -> Enumeration {
    let (n, m, t) = (data.dims.n, data.dims.m, data.dims.t);
    let k = n * t;
    assert!(k <= 16, "enumeration is exponential");
    let sigma2 = p.alpha * p.rho / (2.0 - p.alpha);
    let p10 = p.lambda * p.p01 / (1.0 - p.lambda);
    let cov_theta = DMatrix::from_fn(k, k, |a, b| {
        let (ta, na, tb, nb) = (a / n, a % n, b / n, b % n);
        if na == nb {
            C64::new(sigma2 * (1.0 - p.alpha).powi((ta as i32 - tb as i32).abs()), 0.0)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let y = DVector::from_iterator(m * t, data.y.iter().flatten().copied());
    let zeta = DVector::from_element(k, p.zeta);

    let mut log_post = Vec::with_capacity(1 << k);
    for mask in 0u32..(1 << k) {
        let on = |tt: usize, nn: usize| mask >> (tt * n + nn) & 1 == 1;
        let mut b = DMatrix::from_element(m * t, k, C64::new(0.0, 0.0));
        for tt in 0..t {
            let a = data.operator(tt);
            for nn in 0..n {
                if on(tt, nn) {
                    for r in 0..m {
                        b[(tt * m + r, tt * n + nn)] = a.get(r, nn);
                    }
                }
            }
        }
        let cov =
            &b * &cov_theta * b.adjoint() + DMatrix::from_diagonal_element(m * t, m * t, C64::new(p.sigma_e2, 0.0));
        let chol = cov.cholesky().expect("measurement covariance is positive definite");
        let resid = &y - &b * &zeta;
        let solved = chol.solve(&resid);
        let quad = resid.dotc(&solved).re;
        let log_det: f64 = (0..m * t).map(|i| 2.0 * chol.l()[(i, i)].re.ln()).sum();
        let mut log_prior = 0.0;
        for nn in 0..n {
            log_prior += if on(0, nn) { p.lambda.ln() } else { (1.0 - p.lambda).ln() };
            for tt in 1..t {
                let trans = match (on(tt - 1, nn), on(tt, nn)) {
                    (true, true) => 1.0 - p.p01,
                    (true, false) => p.p01,
                    (false, true) => p10,
                    (false, false) => 1.0 - p10,
                };
                log_prior += trans.ln();
            }
        }
        log_post.push(log_prior - log_det - quad);
    }
    let shift = log_post.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_post.iter().map(|l| (l - shift).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut s_prob = vec![vec![0.0; n]; t];
    let mut s_pair = vec![vec![0.0; n]; t.saturating_sub(1)];
    for (mask, wi) in w.iter().enumerate() {
        let on = |tt: usize, nn: usize| mask >> (tt * n + nn) & 1 == 1;
        for tt in 0..t {
            for nn in 0..n {
                if on(tt, nn) {
                    s_prob[tt][nn] += wi / total;
                    if tt + 1 < t && on(tt + 1, nn) {
                        s_pair[tt][nn] += wi / total;
                    }
                }
            }
        }
    }
    Enumeration { s_prob, s_pair }
}

/// Dataset with `A = I` drawn from the model.
pub fn identity_dataset(n: usize, t: usize, p: &ModelParams, seed: u64) -> DynamicDataset {
    let truth = sample_signal(p, n, t, seed).expect("valid parameters");
    let mut rng = rng_stream(seed, 99);
    let y = truth.x.iter().map(|row| row.iter().map(|x| x + complex_normal(&mut rng, p.sigma_e2)).collect()).collect();
    let mut data = DynamicDataset::new(y, Operators::Shared(DenseMatrix::identity(n))).expect("consistent sizes");
    data.truth = Some(truth);
    data.params = Some(*p);
    data
}

/// `||a - b|| / ||b||` over all frames.
pub fn relative_error(a: &[Vec<C64>], b: &[Vec<C64>]) -> f64 {
    let num: f64 = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().flatten().map(|y| y.norm_sqr()).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Runs one forward/backward sweep with frame outputs fixed at `phi = y`,
/// `c = sigma_e2`, the exact local evidence when `A = I`.
pub fn exact_evidence_posteriors(y: &[Vec<C64>], p: &ModelParams) -> PosteriorEstimates {
    let (t_all, n) = (y.len(), y[0].len());
    let cfg = SolverConfig::default();
    let frames: Vec<Option<AmpFrameState>> = y
        .iter()
        .map(|row| {
            Some(AmpFrameState {
                phi: row.clone(),
                mu: row.clone(),
                v: vec![0.0; n],
                c: p.sigma_e2,
                c_prev: p.sigma_e2,
                z: vec![C64::new(0.0, 0.0); n],
                iterations: 1,
            })
        })
        .collect();
    let mut msgs = MessageState::new(n, t_all, p);
    for (t, frame) in frames.iter().enumerate() {
        msgs.step_into(t);
        msgs.step_out(t, frame.as_ref().unwrap(), p, &cfg);
        if t + 1 < t_all {
            msgs.step_across_forward(t, p).unwrap();
        }
    }
    for t in (1..t_all).rev() {
        msgs.step_across_backward(t, p).unwrap();
    }
    collect_posteriors(&msgs, &frames, p, t_all).unwrap()
}
