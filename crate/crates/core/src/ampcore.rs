//! Bernoulli-Gaussian soft-thresholding and the per-frame AMP loop.
//!
//! Within a frame every coefficient sees an independent spike-and-slab local
//! prior `(1 - pi) delta(x) + pi CN(x; xi, psi)`. AMP reduces the dense
//! measurement model to scalar channels `phi = x + CN(0, c)`; the functions
//! here return the posterior mean `F`, variance `G` and slope `F' = G / c` of
//! those channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{LinearOperator, C64};

/// Spike-and-slab prior handed to AMP for one coefficient.
///
/// `psi_bar = f64::INFINITY` encodes an uninformative slab.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalPrior {
    pub pi_bar: f64,
    pub xi_bar: C64,
    pub psi_bar: f64,
}

impl LocalPrior {
    pub fn new(pi_bar: f64, xi_bar: C64, psi_bar: f64) -> Result<Self> {
        let p = Self { pi_bar, xi_bar, psi_bar };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi_bar) {
            return Err(Error::InvalidParameter(format!("pi_bar={} not in [0,1]", self.pi_bar)));
        }
        if !(self.psi_bar > 0.0) {
            return Err(Error::InvalidParameter(format!("psi_bar={} must be positive", self.psi_bar)));
        }
        if !(self.xi_bar.re.is_finite() && self.xi_bar.im.is_finite()) {
            return Err(Error::InvalidParameter("xi_bar must be finite".into()));
        }
        Ok(())
    }
}

/// Scalar-channel posterior under a spike-and-slab prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarPosterior {
    /// `ln gamma`, possibly infinite.
    pub log_gamma: f64,
    /// Posterior activity probability `1 / (1 + gamma)`.
    pub active: f64,
    /// `F(phi; c)`
    pub mean: C64,
    /// `G(phi; c)`
    pub var: f64,
}

/// `1 / (1 + e^u)` without overflow.
#[inline]
pub(crate) fn logistic_neg(u: f64) -> f64 {
    if u.is_nan() {
        return f64::NAN;
    }
    if u >= 0.0 {
        let e = (-u).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + u.exp())
    }
}

/// Log-likelihood ratio `ln [ p(phi | inactive) / p(phi | active) ]` of the
/// scalar channel, i.e. `ln gamma` without the prior odds.
#[inline]
pub fn log_evidence_ratio(phi: C64, c: f64, xi: C64, psi: f64) -> f64 {
    if psi.is_infinite() {
        return f64::INFINITY;
    }
    let quad = psi * phi.norm_sqr() + 2.0 * c * (xi.conj() * phi).re - c * xi.norm_sqr();
    ((psi + c) / c).ln() - quad / (c * (psi + c))
}

/// Evaluates `gamma`, `F` and `G` together in the log domain.
#[inline]
pub fn scalar_posterior(phi: C64, c: f64, prior: &LocalPrior) -> ScalarPosterior {
    let LocalPrior { pi_bar: pi, xi_bar: xi, psi_bar: psi } = *prior;
    if psi.is_infinite() {
        // A flat slab carries zero density, so only a certain-active prior survives.
        return if pi >= 1.0 {
            ScalarPosterior { log_gamma: f64::NEG_INFINITY, active: 1.0, mean: phi, var: c }
        } else {
            ScalarPosterior { log_gamma: f64::INFINITY, active: 0.0, mean: C64::new(0.0, 0.0), var: 0.0 }
        };
    }
    let log_odds = if pi <= 0.0 {
        f64::INFINITY
    } else if pi >= 1.0 {
        f64::NEG_INFINITY
    } else {
        ((1.0 - pi) / pi).ln()
    };
    let log_gamma = log_odds + log_evidence_ratio(phi, c, xi, psi);
    let active = logistic_neg(log_gamma);
    // 1 - active, computed without cancellation
    let inactive = logistic_neg(-log_gamma);
    let slab_mean = (phi * psi + xi * c) / (psi + c);
    let slab_var = psi * c / (psi + c);
    // gamma |F|^2 = gamma P^2 |m|^2 = P (1 - P) |m|^2
    ScalarPosterior {
        log_gamma,
        active,
        mean: slab_mean * active,
        var: active * slab_var + active * inactive * slab_mean.norm_sqr(),
    }
}

/// `gamma(phi; c)`, `+inf` for a certainly inactive prior.
pub fn gamma(phi: C64, c: f64, prior: &LocalPrior) -> f64 {
    scalar_posterior(phi, c, prior).log_gamma.exp()
}

/// Posterior mean `F(phi; c)`.
pub fn f_mean(phi: C64, c: f64, prior: &LocalPrior) -> C64 {
    scalar_posterior(phi, c, prior).mean
}

/// Posterior variance `G(phi; c)`.
pub fn g_var(phi: C64, c: f64, prior: &LocalPrior) -> f64 {
    scalar_posterior(phi, c, prior).var
}

/// `F'(phi; c) = G(phi; c) / c`.
pub fn f_prime(phi: C64, c: f64, prior: &LocalPrior) -> f64 {
    g_var(phi, c, prior) / c
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmpConfig {
    pub max_iters: usize,
    /// Stop once `||mu_i - mu_{i-1}||_2 / N` falls below this. Not tested
    /// after the first iteration, whose step is shrunk by the conservative
    /// starting `c`, unless the tolerance is infinite.
    pub stop_tol: f64,
    /// Weight on the new `mu` and `z` iterates; `None` disables damping.
    pub damping: Option<f64>,
    /// Stand-in for infinite `psi_bar` entries when seeding `c`.
    pub infinite_variance_fill: f64,
    /// Abort once `c` exceeds its initial value by this factor.
    pub divergence_factor: f64,
}

impl Default for AmpConfig {
    fn default() -> Self {
        Self { max_iters: 25, stop_tol: 1e-5, damping: None, infinite_variance_fill: 1.0, divergence_factor: 1e6 }
    }
}

/// AMP iterates after the last inner iteration of a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct AmpFrameState {
    /// Pseudo-measurements from the last iteration.
    pub phi: Vec<C64>,
    /// Posterior means `F(phi; c_prev)`.
    pub mu: Vec<C64>,
    /// Posterior variances `G(phi; c_prev)`.
    pub v: Vec<f64>,
    /// Variance state after the last iteration.
    pub c: f64,
    /// Variance state that was paired with `phi`.
    pub c_prev: f64,
    /// Onsager-corrected residual.
    pub z: Vec<C64>,
    pub iterations: usize,
}

/// Initial `c`: a hundred times the summed slab variances.
pub fn initial_variance(priors: &[LocalPrior], fill: f64) -> f64 {
    100.0 * priors.iter().map(|p| if p.psi_bar.is_finite() { p.psi_bar } else { fill }).sum::<f64>()
}

/// Runs the AMP inner loop for one frame from the standard initialization
/// `z = y`, `mu = 0`.
pub fn amp_frame<O: LinearOperator + ?Sized>(
    y: &[C64],
    a: &O,
    priors: &[LocalPrior],
    sigma_e2: f64,
    config: &AmpConfig,
) -> Result<AmpFrameState> {
    amp_frame_from(y, a, priors, sigma_e2, config, None)
}

/// As [`amp_frame`], optionally warm-started from `(mu, z, c)` of a previous
/// visit to the same frame.
pub fn amp_frame_from<O: LinearOperator + ?Sized>(
    y: &[C64],
    a: &O,
    priors: &[LocalPrior],
    sigma_e2: f64,
    config: &AmpConfig,
    warm: Option<&AmpFrameState>,
) -> Result<AmpFrameState> {
    let (m, n) = (a.rows(), a.cols());
    if y.len() != m || priors.len() != n {
        return Err(Error::Dimension(format!(
            "y has {} entries, priors {}, operator is {m}x{n}",
            y.len(),
            priors.len()
        )));
    }
    if !(sigma_e2 > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma_e2={sigma_e2}")));
    }
    let c_init = initial_variance(priors, config.infinite_variance_fill).max(sigma_e2);

    let (mut mu, mut z, mut c) = match warm {
        Some(w) if w.mu.len() == n && w.z.len() == m => (w.mu.clone(), w.z.clone(), w.c),
        _ => (vec![C64::new(0.0, 0.0); n], y.to_vec(), c_init),
    };
    let c_ref = c.max(c_init);

    let mut phi = vec![C64::new(0.0, 0.0); n];
    let mut mu_next = vec![C64::new(0.0, 0.0); n];
    let mut v = vec![0.0; n];
    let mut a_mu = vec![C64::new(0.0, 0.0); m];
    let mut c_prev = c;
    let mut iterations = 0;

    for i in 1..=config.max_iters.max(1) {
        iterations = i;
        a.apply_adjoint(&z, &mut phi);
        for (p, u) in phi.iter_mut().zip(&mu) {
            *p += u;
        }

        let mut v_sum = 0.0;
        for ((prior, &p), (u, var)) in priors.iter().zip(&phi).zip(mu_next.iter_mut().zip(v.iter_mut())) {
            let post = scalar_posterior(p, c, prior);
            *u = post.mean;
            *var = post.var;
            v_sum += post.var;
        }
        // sum_n F'(phi; c) = sum_n G / c
        let onsager = v_sum / c / m as f64;
        let c_next = sigma_e2 + v_sum / m as f64;

        if let Some(d) = config.damping {
            for (new, old) in mu_next.iter_mut().zip(&mu) {
                *new = *new * d + *old * (1.0 - d);
            }
        }
        a.apply(&mu_next, &mut a_mu);
        for ((zm, ym), am) in z.iter_mut().zip(y).zip(&a_mu) {
            let fresh = ym - am + *zm * onsager;
            *zm = match config.damping {
                Some(d) => fresh * d + *zm * (1.0 - d),
                None => fresh,
            };
        }

        if !c_next.is_finite() || z.iter().chain(&mu_next).any(|v| !(v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::Divergence { iteration: i, reason: "non-finite iterate".into() });
        }
        if c_next > config.divergence_factor * c_ref {
            return Err(Error::Divergence {
                iteration: i,
                reason: format!("variance state {c_next:e} exceeds {:e} x initial", config.divergence_factor),
            });
        }

        let change = crate::linalg::dist_sqr(&mu_next, &mu).sqrt() / n as f64;
        std::mem::swap(&mut mu, &mut mu_next);
        c_prev = c;
        c = c_next;
        if change < config.stop_tol && (i > 1 || config.stop_tol.is_infinite()) {
            break;
        }
    }

    Ok(AmpFrameState { phi, mu, v, c, c_prev, z, iterations })
}
