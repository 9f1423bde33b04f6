//! Signal model: Markov support chains, Gauss-Markov amplitudes and the
//! linear measurement process, plus synthetic data generation.
//!
//! Each coefficient `x_n(t) = s_n(t) * theta_n(t)`. The support `s_n(.)` is a
//! stationary binary Markov chain with activity rate `lambda` and
//! active-to-inactive probability `p01`; the amplitude follows
//!
//! ```text
//! theta(t) = (1 - alpha) (theta(t-1) - zeta) + alpha w(t) + zeta,   w ~ CN(0, rho)
//! ```
//!
//! whose stationary variance is `alpha rho / (2 - alpha)`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, LinearOperator, C64};

/// `p10 = lambda p01 / (1 - lambda)`, the inactive-to-active probability that
/// keeps the chain stationary at activity rate `lambda`.
pub fn derive_transition(lambda: f64, p01: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) || !(0.0..=1.0).contains(&p01) {
        return Err(Error::InvalidParameter(format!("lambda={lambda}, p01={p01} must lie in [0,1]")));
    }
    if lambda == 1.0 {
        return Err(Error::InvalidParameter("lambda = 1 leaves p10 undefined".into()));
    }
    let p10 = lambda * p01 / (1.0 - lambda);
    // p01 = (1 - lambda) / lambda is feasible but can round to p10 = 1 + ulp
    if p10 > 1.0 + 4.0 * f64::EPSILON {
        return Err(Error::InvalidParameter(format!("lambda={lambda}, p01={p01} imply p10={p10} > 1")));
    }
    Ok(p10.min(1.0))
}

/// Stationary amplitude variance `alpha rho / (2 - alpha)`.
pub fn steady_state_variance(alpha: f64, rho: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("alpha={alpha} must lie in (0,1] for a stationary variance")));
    }
    if !(rho > 0.0) {
        return Err(Error::InvalidParameter(format!("rho={rho} must be positive")));
    }
    Ok(alpha * rho / (2.0 - alpha))
}

/// Inverse of [`steady_state_variance`]: the perturbation variance that yields
/// stationary variance `sigma2`.
pub fn perturbation_variance(alpha: f64, sigma2: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) || !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!("alpha={alpha}, sigma2={sigma2}")));
    }
    Ok(sigma2 * (2.0 - alpha) / alpha)
}

/// AWGN variance giving `snr_db` for the given average per-sample energy of
/// the noiseless measurements.
pub fn noise_variance_for_snr(signal_power: f64, snr_db: f64) -> Result<f64> {
    if !(signal_power > 0.0) || !signal_power.is_finite() {
        return Err(Error::InvalidParameter(format!("signal power {signal_power} must be positive")));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidParameter(format!("snr_db={snr_db}")));
    }
    Ok(signal_power / 10f64.powf(snr_db / 10.0))
}

/// The six model hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub lambda: f64,
    pub p01: f64,
    pub zeta: Complex64,
    pub alpha: f64,
    pub rho: f64,
    pub sigma_e2: f64,
}

impl ModelParams {
    /// Builds parameters from the stationary amplitude variance instead of `rho`.
    pub fn from_variance(
        lambda: f64,
        p01: f64,
        zeta: Complex64,
        alpha: f64,
        sigma2: f64,
        sigma_e2: f64,
    ) -> Result<Self> {
        let p = Self { lambda, p01, zeta, alpha, rho: perturbation_variance(alpha, sigma2)?, sigma_e2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidParameter(format!("{name}={v} not in [0,1]")))
            }
        };
        prob("lambda", self.lambda)?;
        prob("p01", self.p01)?;
        prob("alpha", self.alpha)?;
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidParameter(format!("rho={} must be positive", self.rho)));
        }
        if !(self.sigma_e2 > 0.0) || !self.sigma_e2.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma_e2={} must be positive", self.sigma_e2)));
        }
        if !self.zeta.re.is_finite() || !self.zeta.im.is_finite() {
            return Err(Error::InvalidParameter("zeta must be finite".into()));
        }
        self.p10().map(|_| ())
    }

    /// Inactive-to-active transition probability. An always-active chain
    /// (`lambda = 1`) is accepted only with `p01 = 0`, in which case `p10` is
    /// irrelevant and reported as 1.
    pub fn p10(&self) -> Result<f64> {
        if self.lambda == 1.0 {
            return if self.p01 == 0.0 {
                Ok(1.0)
            } else {
                Err(Error::InvalidParameter("lambda = 1 requires p01 = 0".into()))
            };
        }
        derive_transition(self.lambda, self.p01)
    }

    /// Stationary amplitude variance; zero for static amplitudes.
    pub fn sigma2(&self) -> f64 {
        self.alpha * self.rho / (2.0 - self.alpha)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m: usize,
    pub t: usize,
}

impl Dims {
    pub fn new(n: usize, m: usize, t: usize) -> Result<Self> {
        if n == 0 || m == 0 || t == 0 {
            return Err(Error::InvalidParameter(format!("dimensions must be positive (N={n}, M={m}, T={t})")));
        }
        Ok(Self { n, m, t })
    }
}

/// Hidden support, amplitudes and signal of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub s: Vec<Vec<bool>>,
    pub theta: Vec<Vec<C64>>,
    pub x: Vec<Vec<C64>>,
}

impl GroundTruth {
    pub fn from_parts(s: Vec<Vec<bool>>, theta: Vec<Vec<C64>>) -> Self {
        let x = s
            .iter()
            .zip(&theta)
            .map(|(st, th)| st.iter().zip(th).map(|(&on, &v)| if on { v } else { C64::new(0.0, 0.0) }).collect())
            .collect();
        Self { s, theta, x }
    }
}

/// Measurement operators, either one per frame or one aliased across frames.
#[derive(Clone, Debug, PartialEq)]
pub enum Operators {
    Shared(DenseMatrix),
    PerFrame(Vec<DenseMatrix>),
}

impl Operators {
    pub fn get(&self, t: usize) -> &DenseMatrix {
        match self {
            Operators::Shared(a) => a,
            Operators::PerFrame(v) => &v[t],
        }
    }

    pub fn is_time_invariant(&self) -> bool {
        matches!(self, Operators::Shared(_))
    }
}

#[derive(Clone, Debug)]
pub struct DynamicDataset {
    pub dims: Dims,
    pub y: Vec<Vec<C64>>,
    pub operators: Operators,
    pub truth: Option<GroundTruth>,
    /// Generating parameters, when known.
    pub params: Option<ModelParams>,
    pub seed: Option<u64>,
}

impl DynamicDataset {
    pub fn new(y: Vec<Vec<C64>>, operators: Operators) -> Result<Self> {
        let t = y.len();
        if t == 0 {
            return Err(Error::InvalidParameter("dataset has no frames".into()));
        }
        let a0 = operators.get(0);
        let dims = Dims::new(a0.cols(), a0.rows(), t)?;
        let ds = Self { dims, y, operators, truth: None, params: None, seed: None };
        ds.validate()?;
        Ok(ds)
    }

    pub fn operator(&self, t: usize) -> &DenseMatrix {
        self.operators.get(t)
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { n, m, t } = self.dims;
        if self.y.len() != t {
            return Err(Error::Dimension(format!("{} measurement frames, T={t}", self.y.len())));
        }
        if let Operators::PerFrame(v) = &self.operators {
            if v.len() != t {
                return Err(Error::Dimension(format!("{} operators, T={t}", v.len())));
            }
        }
        for k in 0..t {
            let a = self.operator(k);
            if a.rows() != m || a.cols() != n || self.y[k].len() != m {
                return Err(Error::Dimension(format!("frame {k} inconsistent with N={n}, M={m}")));
            }
            let err = a.max_column_norm_error();
            if err > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "frame {k}: columns not unit norm (max deviation {err:e})"
                )));
            }
            if let Operators::Shared(_) = self.operators {
                break;
            }
        }
        if let Some(truth) = &self.truth {
            let ok = truth.x.len() == t
                && truth.s.len() == t
                && truth.theta.len() == t
                && truth.x.iter().all(|v| v.len() == n)
                && truth.s.iter().all(|v| v.len() == n)
                && truth.theta.iter().all(|v| v.len() == n);
            if !ok {
                return Err(Error::Dimension("ground truth shape".into()));
            }
        }
        Ok(())
    }

    /// `A(t) x(t)` for every frame, using the ground truth.
    pub fn noiseless(&self) -> Option<Vec<Vec<C64>>> {
        let truth = self.truth.as_ref()?;
        Some(
            (0..self.dims.t)
                .map(|k| {
                    let mut out = vec![C64::default(); self.dims.m];
                    self.operator(k).apply(&truth.x[k], &mut out);
                    out
                })
                .collect(),
        )
    }

    /// Realized SNR in dB, when ground truth is present.
    pub fn empirical_snr_db(&self) -> Option<f64> {
        let clean = self.noiseless()?;
        let (mut sig, mut noise) = (0.0, 0.0);
        for (c, y) in clean.iter().zip(&self.y) {
            for (a, b) in c.iter().zip(y) {
                sig += a.norm_sqr();
                noise += (b - a).norm_sqr();
            }
        }
        Some(10.0 * (sig / noise).log10())
    }
}

/// Options for [`generate_synthetic_with`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    /// Draw one operator and alias it across all frames.
    pub time_invariant: bool,
    /// When set, overrides `sigma_e2` so that the realized measurements
    /// have this SNR (average per-sample energy of `A x` over the noise variance).
    pub snr_db: Option<f64>,
}

const STREAM_SUPPORT: u64 = 0;
const STREAM_AMPLITUDE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_OPERATOR_BASE: u64 = 16;

/// Independent random stream `stream` derived from `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer, used to derive per-trial seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Circular complex Gaussian sample with the given variance.
pub fn complex_normal<R: Rng>(rng: &mut R, variance: f64) -> C64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    C64::new(s * re, s * im)
}

/// i.i.d. `CN(0,1)` matrix with columns rescaled to unit norm.
pub fn random_operator<R: Rng>(rng: &mut R, m: usize, n: usize) -> Result<DenseMatrix> {
    let data = (0..m * n).map(|_| complex_normal(rng, 1.0)).collect();
    let mut a = DenseMatrix::from_row_major(m, n, data)?;
    a.normalize_columns()?;
    Ok(a)
}

/// Draws `(s, theta)` from the stationary support chain and amplitude process.
///
/// With `alpha = 0` the amplitudes are static; the initial draw then uses
/// variance `rho` since the stationary variance degenerates to zero.
pub fn sample_signal(params: &ModelParams, n: usize, t: usize, seed: u64) -> Result<GroundTruth> {
    params.validate()?;
    let p10 = params.p10()?;
    let mut srng = rng_stream(seed, STREAM_SUPPORT);
    let mut arng = rng_stream(seed, STREAM_AMPLITUDE);

    let mut s = Vec::with_capacity(t);
    let first: Vec<bool> = (0..n).map(|_| srng.gen::<f64>() < params.lambda).collect();
    s.push(first);
    for k in 1..t {
        let next = s[k - 1]
            .iter()
            .map(|&prev| {
                let u: f64 = srng.gen();
                if prev {
                    u >= params.p01
                } else {
                    u < p10
                }
            })
            .collect();
        s.push(next);
    }

    let a = params.alpha;
    let init_var = if a > 0.0 { params.sigma2() } else { params.rho };
    let mut theta = Vec::with_capacity(t);
    theta.push((0..n).map(|_| params.zeta + complex_normal(&mut arng, init_var)).collect::<Vec<_>>());
    for k in 1..t {
        let next = theta[k - 1]
            .iter()
            .map(|&prev| {
                let w = complex_normal(&mut arng, params.rho);
                (prev - params.zeta) * (1.0 - a) + w * a + params.zeta
            })
            .collect();
        theta.push(next);
    }
    Ok(GroundTruth::from_parts(s, theta))
}

/// Synthetic dataset with time-varying operators and noise variance
/// `params.sigma_e2`. Fully determined by `seed`.
pub fn generate_synthetic(params: &ModelParams, dims: Dims, seed: u64) -> Result<DynamicDataset> {
    generate_synthetic_with(params, dims, GenerateOptions::default(), seed)
}

pub fn generate_synthetic_with(
    params: &ModelParams,
    dims: Dims,
    options: GenerateOptions,
    seed: u64,
) -> Result<DynamicDataset> {
    let Dims { n, m, t } = Dims::new(dims.n, dims.m, dims.t)?;
    let truth = sample_signal(params, n, t, seed)?;

    let operators = if options.time_invariant {
        let mut rng = rng_stream(seed, STREAM_OPERATOR_BASE);
        Operators::Shared(random_operator(&mut rng, m, n)?)
    } else {
        Operators::PerFrame(
            (0..t)
                .map(|k| {
                    let mut rng = rng_stream(seed, STREAM_OPERATOR_BASE + k as u64);
                    random_operator(&mut rng, m, n)
                })
                .collect::<Result<_>>()?,
        )
    };

    let clean: Vec<Vec<C64>> = (0..t)
        .map(|k| {
            let mut out = vec![C64::default(); m];
            operators.get(k).apply(&truth.x[k], &mut out);
            out
        })
        .collect();

    let mut params = *params;
    if let Some(snr) = options.snr_db {
        let energy: f64 = clean.iter().flatten().map(|v| v.norm_sqr()).sum();
        params.sigma_e2 = noise_variance_for_snr(energy / (t * m) as f64, snr)?;
    }

    let mut nrng = rng_stream(seed, STREAM_NOISE);
    let sd = params.sigma_e2.sqrt();
    let y = clean
        .into_iter()
        .map(|frame| frame.into_iter().map(|v| v + complex_normal(&mut nrng, 1.0) * sd).collect())
        .collect();

    Ok(DynamicDataset {
        dims: Dims { n, m, t },
        y,
        operators,
        truth: Some(truth),
        params: Some(params),
        seed: Some(seed),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn base(lambda: f64, p01: f64, alpha: f64) -> ModelParams {
        ModelParams::from_variance(lambda, p01, C64::new(0.0, 0.0), alpha, 1.0, 0.01).unwrap()
    }

    #[test]
    fn transition_examples() {
        assert_relative_eq!(derive_transition(0.1, 0.05).unwrap(), 0.005555555555555556, epsilon = 1e-12);
        assert_relative_eq!(derive_transition(0.5, 0.2).unwrap(), 0.2);
        assert_eq!(derive_transition(0.0, 0.7).unwrap(), 0.0);
        assert!(derive_transition(1.0, 0.1).is_err());
        assert!(derive_transition(0.9, 0.5).is_err());
        for lambda in [0.5, 0.6, 0.75, 0.8870157946565527, 0.99] {
            assert!(derive_transition(lambda, (1.0 - lambda) / lambda).unwrap() <= 1.0);
        }
    }

    #[test]
    fn steady_state_examples() {
        assert_relative_eq!(steady_state_variance(1.0, 2.0).unwrap(), 2.0);
        assert!(steady_state_variance(1e-9, 1.0).unwrap() < 1e-9);
        assert!(steady_state_variance(0.0, 1.0).is_err());
        let rho = perturbation_variance(0.01, 1.0).unwrap();
        assert_relative_eq!(rho, 199.0, epsilon = 1e-9);
        assert_relative_eq!(steady_state_variance(0.01, rho).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn snr_examples() {
        assert_relative_eq!(noise_variance_for_snr(1.0, 0.0).unwrap(), 1.0);
        assert_relative_eq!(noise_variance_for_snr(1.0, 25.0).unwrap(), 0.0031622776601683794, epsilon = 1e-15);
        assert!(noise_variance_for_snr(0.0, 10.0).is_err());
    }

    #[test]
    fn params_reject_infeasible_chain() {
        let mut p = base(0.5, 0.2, 0.5);
        p.lambda = 0.9;
        p.p01 = 0.5;
        assert!(p.validate().is_err());
        p.lambda = 1.0;
        p.p01 = 0.0;
        assert_eq!(p.p10().unwrap(), 1.0);
        p.rho = -1.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_p01_freezes_support() {
        let p = base(0.3, 0.0, 0.2);
        let g = sample_signal(&p, 200, 10, 3).unwrap();
        for k in 1..10 {
            assert_eq!(g.s[k], g.s[0]);
        }
    }

    #[test]
    fn zero_alpha_freezes_amplitudes() {
        let mut p = base(0.3, 0.1, 0.5);
        p.alpha = 0.0;
        p.rho = 1.0;
        let g = sample_signal(&p, 50, 6, 11).unwrap();
        for k in 1..6 {
            assert_eq!(g.theta[k], g.theta[0]);
        }
        assert!(g.theta[0].iter().any(|v| v.norm() > 0.0));
    }

    #[test]
    fn x_is_support_times_amplitude() {
        let p = base(0.4, 0.1, 0.3);
        let g = sample_signal(&p, 64, 5, 1).unwrap();
        for k in 0..5 {
            for j in 0..64 {
                let want = if g.s[k][j] { g.theta[k][j] } else { C64::new(0.0, 0.0) };
                assert_eq!(g.x[k][j], want);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = base(0.2, 0.05, 0.1);
        let dims = Dims::new(40, 20, 4).unwrap();
        let a = generate_synthetic(&p, dims, 99).unwrap();
        let b = generate_synthetic(&p, dims, 99).unwrap();
        assert_eq!(a.y, b.y);
        assert_eq!(a.operators, b.operators);
        let c = generate_synthetic(&p, dims, 100).unwrap();
        assert_ne!(a.y, c.y);
    }

    #[test]
    fn operators_have_unit_columns() {
        let p = base(0.2, 0.05, 0.1);
        let ds = generate_synthetic(&p, Dims::new(30, 12, 3).unwrap(), 5).unwrap();
        for k in 0..3 {
            assert!(ds.operator(k).max_column_norm_error() < 1e-12);
        }
        ds.validate().unwrap();
    }

    #[test]
    fn time_invariant_aliases_one_operator() {
        let p = base(0.2, 0.05, 0.1);
        let opts = GenerateOptions { time_invariant: true, snr_db: None };
        let ds = generate_synthetic_with(&p, Dims::new(30, 12, 3).unwrap(), opts, 5).unwrap();
        assert!(ds.operators.is_time_invariant());
        assert_eq!(ds.operator(0), ds.operator(2));
    }

    #[test]
    fn snr_target_is_met() {
        let p = base(0.2, 0.05, 0.1);
        let opts = GenerateOptions { time_invariant: false, snr_db: Some(25.0) };
        for seed in 0..5 {
            let ds = generate_synthetic_with(&p, Dims::new(256, 128, 10).unwrap(), opts, seed).unwrap();
            let snr = ds.empirical_snr_db().unwrap();
            assert!((snr - 25.0).abs() < 0.5, "seed {seed}: {snr} dB");
        }
    }

    #[test]
    fn mixed_seeds_differ() {
        let a: Vec<u64> = (0..100).map(|i| mix_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 100);
    }
}
