//! The turbo message schedule that couples per-frame AMP with the temporal
//! support and amplitude chains.
//!
//! Every frame visit runs four phases:
//!
//! * **into**: combine the forward and backward chain messages into the
//!   spike-and-slab local prior of each coefficient;
//! * **within**: run AMP on the frame's measurements under that prior;
//! * **out**: turn AMP's scalar channels into outgoing support and amplitude
//!   messages, collapsing the amplitude mixture to one Gaussian;
//! * **across**: push the updated beliefs to the neighbouring frame.
//!
//! Filtering is a single forward sweep. Smoothing alternates forward sweeps
//! (`t = 1..T`) with backward sweeps (`t = T-1..1`).

use log::warn;
use serde::{Deserialize, Serialize};

use crate::ampcore::{amp_frame_from, log_evidence_ratio, logistic_neg, AmpConfig, AmpFrameState, LocalPrior};
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::model::{DynamicDataset, ModelParams};
use crate::posterior::PosteriorEstimates;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Filter,
    Smooth,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub mode: Mode,
    /// Forward/backward passes in smoothing mode.
    pub passes: usize,
    /// Inner AMP iterations per frame visit.
    pub max_inner_iters: usize,
    /// AMP early-termination threshold on `||mu_i - mu_{i-1}|| / N`.
    pub stop_tol: f64,
    /// Scale of the broad component in the amplitude message mixture.
    pub epsilon: f64,
    /// Activity threshold of the threshold collapse.
    pub tau: f64,
    /// Below this `p01` the Taylor collapse replaces the threshold collapse.
    pub taylor_switch_p01: f64,
    pub damping: Option<f64>,
    /// Start each AMP visit from the frame's previous iterates.
    pub warm_start: bool,
    /// Stop smoothing early once no estimate moves by more than this.
    pub pass_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Smooth,
            passes: 5,
            max_inner_iters: 25,
            stop_tol: 1e-5,
            epsilon: 1e-7,
            tau: 0.99,
            taylor_switch_p01: 0.025,
            damping: None,
            warm_start: false,
            pass_tol: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn filter() -> Self {
        Self { mode: Mode::Filter, passes: 1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::InvalidParameter(format!("epsilon={} must lie in (0, 1e-3]", self.epsilon)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidParameter(format!("tau={} must lie in (0,1)", self.tau)));
        }
        if self.mode == Mode::Smooth && self.passes == 0 {
            return Err(Error::InvalidParameter("smoothing needs at least one pass".into()));
        }
        if self.max_inner_iters == 0 {
            return Err(Error::InvalidParameter("need at least one AMP iteration".into()));
        }
        if let Some(d) = self.damping {
            if !(d > 0.0 && d <= 1.0) {
                return Err(Error::InvalidParameter(format!("damping={d} must lie in (0,1]")));
            }
        }
        if self.stop_tol.is_nan() || self.stop_tol < 0.0 {
            return Err(Error::InvalidParameter(format!("stop_tol={}", self.stop_tol)));
        }
        Ok(())
    }

    fn amp(&self, sigma2: f64) -> AmpConfig {
        AmpConfig {
            max_iters: self.max_inner_iters,
            stop_tol: self.stop_tol,
            damping: self.damping,
            infinite_variance_fill: sigma2,
            ..AmpConfig::default()
        }
    }
}

/// Product of two Gaussian densities given as `(mean, variance)`; an infinite
/// variance is a flat density.
pub fn gauss_product(m1: C64, v1: f64, m2: C64, v2: f64) -> (C64, f64) {
    match (v1.is_infinite(), v2.is_infinite()) {
        (true, true) => (ZERO, f64::INFINITY),
        (true, false) => (m2, v2),
        (false, true) => (m1, v1),
        (false, false) => {
            let v = v1 * v2 / (v1 + v2);
            ((m1 / v1 + m2 / v2) * v, v)
        }
    }
}

/// Support belief into a frame from the two chain messages.
pub fn into_support(lam_fwd: f64, lam_bwd: f64) -> f64 {
    let on = lam_fwd * lam_bwd;
    let den = (1.0 - lam_fwd) * (1.0 - lam_bwd) + on;
    if den == 0.0 {
        warn!("contradictory support messages ({lam_fwd}, {lam_bwd}); treating as inactive");
        return 0.0;
    }
    on / den
}

/// Forward support message through the transition kernel.
pub fn across_support_forward(lam_fwd: f64, pi_fwd: f64, p01: f64, p10: f64) -> Result<f64> {
    let off = (1.0 - lam_fwd) * (1.0 - pi_fwd);
    let on = lam_fwd * pi_fwd;
    let den = off + on;
    if !(den > 0.0) {
        return Err(Error::DegenerateMessage(format!("forward support message with lambda={lam_fwd}, pi={pi_fwd}")));
    }
    Ok((p10 * off + (1.0 - p01) * on) / den)
}

/// Backward support message: the belief on `s(t+1)` excluding the transition
/// factor, pulled back through `p(s(t+1) | s(t))`.
pub fn across_support_backward(lam_bwd: f64, pi_fwd: f64, p01: f64, p10: f64) -> Result<f64> {
    let on = pi_fwd * lam_bwd;
    let off = (1.0 - pi_fwd) * (1.0 - lam_bwd);
    let given_on = (1.0 - p01) * on + p01 * off;
    let given_off = p10 * on + (1.0 - p10) * off;
    let den = given_on + given_off;
    if !(den > 0.0) {
        return Err(Error::DegenerateMessage(format!("backward support message with lambda={lam_bwd}, pi={pi_fwd}")));
    }
    Ok(given_on / den)
}

/// Forward amplitude message `(eta, kappa)` into the next frame.
pub fn across_amplitude_forward(
    eta_fwd: C64,
    kappa_fwd: f64,
    xi_fwd: C64,
    psi_fwd: f64,
    params: &ModelParams,
) -> (C64, f64) {
    let a = params.alpha;
    let (mean, var) = gauss_product(eta_fwd, kappa_fwd, xi_fwd, psi_fwd);
    if var.is_infinite() {
        return if a == 0.0 {
            (ZERO, f64::INFINITY)
        } else if a == 1.0 {
            (params.zeta, params.rho)
        } else {
            (params.zeta * a, f64::INFINITY)
        };
    }
    (mean * (1.0 - a) + params.zeta * a, (1.0 - a) * (1.0 - a) * var + a * a * params.rho)
}

/// Backward amplitude message: the belief on `theta(t+1)` excluding the
/// transition factor, pulled back by inverting the Gauss-Markov recursion.
pub fn across_amplitude_backward(
    eta_bwd: C64,
    kappa_bwd: f64,
    xi_fwd: C64,
    psi_fwd: f64,
    params: &ModelParams,
) -> (C64, f64) {
    let a = params.alpha;
    if a >= 1.0 {
        return (ZERO, f64::INFINITY);
    }
    let (mean, var) = gauss_product(eta_bwd, kappa_bwd, xi_fwd, psi_fwd);
    if var.is_infinite() {
        return (ZERO, f64::INFINITY);
    }
    let g = 1.0 - a;
    ((mean - params.zeta * a) / g, (var + a * a * params.rho) / (g * g))
}

/// Weight of the informative component in the amplitude message mixture.
pub fn omega(pi: f64, epsilon: f64) -> f64 {
    let e2 = epsilon * epsilon;
    let num = e2 * pi;
    let den = (1.0 - pi) + num;
    if den == 0.0 {
        return 0.0;
    }
    num / den
}

/// Collapse by thresholding the incoming activity belief.
pub fn collapse_threshold(phi: C64, c: f64, pi_bar: f64, epsilon: f64, tau: f64) -> (C64, f64) {
    if pi_bar <= tau {
        (phi / epsilon, c / (epsilon * epsilon))
    } else {
        (phi, c)
    }
}

/// Collapse by a second-order expansion of the negative log mixture
///
/// ```text
/// (1 - W) CN(theta; phi / eps, c / eps^2) + W CN(theta; phi, c),   W = omega(pi_bar)
/// ```
///
/// around its mode, reading off the Gaussian with the same gradient and
/// curvature there. The mode is taken at whichever component mean carries
/// the larger mixture density. Returns `None` when the curvature is not
/// positive and finite.
pub fn collapse_taylor(phi: C64, c: f64, pi_bar: f64, epsilon: f64) -> Option<(C64, f64)> {
    let w = omega(pi_bar, epsilon);
    if w >= 1.0 {
        return Some((phi, c));
    }
    if w <= 0.0 {
        return Some((phi / epsilon, c / (epsilon * epsilon)));
    }
    let comps = [(w.ln(), phi, c), ((1.0 - w).ln(), phi / epsilon, c / (epsilon * epsilon))];

    // log density, Wirtinger gradient and curvature of -log p at theta0
    let expand = |theta0: C64| {
        let logs = comps.map(|(lw, m, v)| lw - v.ln() - (theta0 - m).norm_sqr() / v);
        let top = logs[0].max(logs[1]);
        let log_density = top + ((logs[0] - top).exp() + (logs[1] - top).exp()).ln();
        let r_narrow = logistic_neg(logs[1] - logs[0]);
        let r = [r_narrow, 1.0 - r_narrow];
        let slopes = comps.map(|(_, m, v)| (theta0 - m) / v);
        let grad = slopes[0] * r[0] + slopes[1] * r[1];
        let spread = if r[0] > 0.0 && r[1] > 0.0 { r[0] * r[1] * (slopes[0] - slopes[1]).norm_sqr() } else { 0.0 };
        let curv = r[0] / comps[0].2 + r[1] / comps[1].2 - spread;
        (log_density, grad, curv)
    };
    let at_narrow = expand(comps[0].1);
    let at_broad = expand(comps[1].1);
    let (theta0, (_, grad, curv)) =
        if at_narrow.0 >= at_broad.0 { (comps[0].1, at_narrow) } else { (comps[1].1, at_broad) };
    if !(curv > 0.0) || !curv.is_finite() {
        return None;
    }
    let psi = 1.0 / curv;
    Some((theta0 - grad * psi, psi))
}

/// All messages of the temporal sub-graph, flattened `[t * N + n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageState {
    pub n: usize,
    pub t: usize,
    pub lam_fwd: Vec<f64>,
    pub lam_bwd: Vec<f64>,
    pub eta_fwd: Vec<C64>,
    pub kappa_fwd: Vec<f64>,
    pub eta_bwd: Vec<C64>,
    pub kappa_bwd: Vec<f64>,
    pub pi_bar: Vec<f64>,
    pub xi_bar: Vec<C64>,
    pub psi_bar: Vec<f64>,
    pub pi_fwd: Vec<f64>,
    pub xi_fwd: Vec<C64>,
    pub psi_fwd: Vec<f64>,
}

impl MessageState {
    /// Prior messages at the first frame, uninformative everywhere else.
    pub fn new(n: usize, t: usize, params: &ModelParams) -> Self {
        let len = n * t;
        let mut st = Self {
            n,
            t,
            lam_fwd: vec![0.5; len],
            lam_bwd: vec![0.5; len],
            eta_fwd: vec![ZERO; len],
            kappa_fwd: vec![f64::INFINITY; len],
            eta_bwd: vec![ZERO; len],
            kappa_bwd: vec![f64::INFINITY; len],
            pi_bar: vec![0.5; len],
            xi_bar: vec![ZERO; len],
            psi_bar: vec![f64::INFINITY; len],
            pi_fwd: vec![0.5; len],
            xi_fwd: vec![ZERO; len],
            psi_fwd: vec![f64::INFINITY; len],
        };
        st.reset_boundary(params);
        st
    }

    #[inline]
    pub fn idx(&self, t: usize, n: usize) -> usize {
        t * self.n + n
    }

    fn frame(&self, t: usize) -> std::ops::Range<usize> {
        t * self.n..(t + 1) * self.n
    }

    /// Re-applies the chain priors at `t = 1` and the open end at `t = T`.
    pub fn reset_boundary(&mut self, params: &ModelParams) {
        let sigma2 = params.sigma2();
        for i in self.frame(0) {
            self.lam_fwd[i] = params.lambda;
            self.eta_fwd[i] = params.zeta;
            self.kappa_fwd[i] = sigma2;
        }
        for i in self.frame(self.t - 1) {
            self.lam_bwd[i] = 0.5;
            self.eta_bwd[i] = ZERO;
            self.kappa_bwd[i] = f64::INFINITY;
        }
    }

    /// (into): local priors for frame `t`.
    pub fn step_into(&mut self, t: usize) -> Vec<LocalPrior> {
        self.frame(t)
            .map(|i| {
                let pi = into_support(self.lam_fwd[i], self.lam_bwd[i]);
                let (xi, psi) = gauss_product(self.eta_fwd[i], self.kappa_fwd[i], self.eta_bwd[i], self.kappa_bwd[i]);
                self.pi_bar[i] = pi;
                self.xi_bar[i] = xi;
                self.psi_bar[i] = psi;
                LocalPrior { pi_bar: pi, xi_bar: xi, psi_bar: psi }
            })
            .collect()
    }

    /// (out): outgoing support and amplitude messages of frame `t`.
    pub fn step_out(&mut self, t: usize, amp: &AmpFrameState, params: &ModelParams, config: &SolverConfig) {
        let c = amp.c;
        let taylor = params.p01 < config.taylor_switch_p01;
        for (k, i) in self.frame(t).enumerate() {
            let phi = amp.phi[k];
            // (pi_bar / (1 - pi_bar)) gamma is the bare likelihood ratio
            let log_ratio = log_evidence_ratio(phi, c, self.xi_bar[i], self.psi_bar[i]);
            self.pi_fwd[i] = logistic_neg(log_ratio);
            let pi_bar = self.pi_bar[i];
            let threshold = || collapse_threshold(phi, c, pi_bar, config.epsilon, config.tau);
            let (xi, psi) = if taylor {
                collapse_taylor(phi, c, pi_bar, config.epsilon).unwrap_or_else(threshold)
            } else {
                threshold()
            };
            self.xi_fwd[i] = xi;
            self.psi_fwd[i] = psi;
        }
    }

    /// (across), forward: messages into frame `t + 1`.
    pub fn step_across_forward(&mut self, t: usize, params: &ModelParams) -> Result<()> {
        debug_assert!(t + 1 < self.t);
        let p10 = params.p10()?;
        for n in 0..self.n {
            let (i, j) = (self.idx(t, n), self.idx(t + 1, n));
            self.lam_fwd[j] = across_support_forward(self.lam_fwd[i], self.pi_fwd[i], params.p01, p10)?;
            let (eta, kappa) =
                across_amplitude_forward(self.eta_fwd[i], self.kappa_fwd[i], self.xi_fwd[i], self.psi_fwd[i], params);
            self.eta_fwd[j] = eta;
            self.kappa_fwd[j] = kappa;
        }
        Ok(())
    }

    /// (across), backward: messages into frame `t - 1`.
    pub fn step_across_backward(&mut self, t: usize, params: &ModelParams) -> Result<()> {
        debug_assert!(t >= 1 && t < self.t);
        let p10 = params.p10()?;
        for n in 0..self.n {
            let (i, j) = (self.idx(t, n), self.idx(t - 1, n));
            self.lam_bwd[j] = across_support_backward(self.lam_bwd[i], self.pi_fwd[i], params.p01, p10)?;
            let (eta, kappa) =
                across_amplitude_backward(self.eta_bwd[i], self.kappa_bwd[i], self.xi_fwd[i], self.psi_fwd[i], params);
            self.eta_bwd[j] = eta;
            self.kappa_bwd[j] = kappa;
        }
        Ok(())
    }

    /// Every support-type message must stay a probability.
    pub fn check_probabilities(&self) -> Result<()> {
        let fields = [
            ("lam_fwd", &self.lam_fwd),
            ("lam_bwd", &self.lam_bwd),
            ("pi_bar", &self.pi_bar),
            ("pi_fwd", &self.pi_fwd),
        ];
        for (name, v) in fields {
            if let Some(i) = v.iter().position(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::DegenerateMessage(format!(
                    "{name} at t={}, n={} is {}",
                    i / self.n,
                    i % self.n,
                    v[i]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolveStats {
    pub frame_visits: usize,
    pub amp_iterations: usize,
    pub passes: usize,
}

/// DCS-AMP solver over one dataset.
pub struct DcsAmp<'a> {
    data: &'a DynamicDataset,
    params: ModelParams,
    config: SolverConfig,
    msgs: MessageState,
    frames: Vec<Option<AmpFrameState>>,
    stats: SolveStats,
}

impl<'a> DcsAmp<'a> {
    pub fn new(data: &'a DynamicDataset, params: ModelParams, config: SolverConfig) -> Result<Self> {
        config.validate()?;
        check_inference_params(&params)?;
        let (n, t) = (data.dims.n, data.dims.t);
        if data.y.len() != t {
            return Err(Error::Dimension(format!("{} frames for T={t}", data.y.len())));
        }
        Ok(Self {
            data,
            params,
            config,
            msgs: MessageState::new(n, t, &params),
            frames: vec![None; t],
            stats: SolveStats::default(),
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn config(&self) -> &SolverConfig {
        &self.config
    }

    /// Swaps in new hyperparameters; messages are kept.
    pub fn set_params(&mut self, params: ModelParams) -> Result<()> {
        check_inference_params(&params)?;
        self.params = params;
        self.msgs.reset_boundary(&params);
        Ok(())
    }

    pub fn messages(&self) -> &MessageState {
        &self.msgs
    }

    pub fn frame_state(&self, t: usize) -> Option<&AmpFrameState> {
        self.frames[t].as_ref()
    }

    pub fn stats(&self) -> SolveStats {
        self.stats
    }

    /// (into), (within) and (out) at frame `t`.
    pub fn visit(&mut self, t: usize) -> Result<()> {
        let priors = self.msgs.step_into(t);
        let amp_cfg = self.config.amp(self.params.sigma2());
        let warm = if self.config.warm_start { self.frames[t].as_ref() } else { None };
        let state =
            amp_frame_from(&self.data.y[t], self.data.operator(t), &priors, self.params.sigma_e2, &amp_cfg, warm)?;
        self.msgs.step_out(t, &state, &self.params, &self.config);
        self.stats.frame_visits += 1;
        self.stats.amp_iterations += state.iterations;
        self.frames[t] = Some(state);
        Ok(())
    }

    /// Frames `1..T` in order. `skip_first` reuses frame 1 from the preceding
    /// backward sweep, whose inputs are unchanged.
    pub fn forward_sweep(&mut self, skip_first: bool) -> Result<()> {
        self.msgs.reset_boundary(&self.params);
        let t_max = self.data.dims.t;
        for t in 0..t_max {
            if !(skip_first && t == 0 && self.frames[0].is_some()) {
                self.visit(t)?;
            }
            if t + 1 < t_max {
                self.msgs.step_across_forward(t, &self.params)?;
            }
        }
        self.msgs.check_probabilities()
    }

    /// Frames `T-1..1`, each preceded by the backward (across) step.
    pub fn backward_sweep(&mut self) -> Result<()> {
        for t in (0..self.data.dims.t.saturating_sub(1)).rev() {
            self.msgs.step_across_backward(t + 1, &self.params)?;
            self.visit(t)?;
        }
        self.msgs.check_probabilities()
    }

    /// One forward/backward pass.
    pub fn pass(&mut self) -> Result<()> {
        let warm = self.stats.passes > 0 && !self.config.warm_start;
        self.forward_sweep(warm)?;
        self.backward_sweep()?;
        self.stats.passes += 1;
        Ok(())
    }

    /// Runs the configured schedule and returns the posteriors.
    pub fn run(&mut self) -> Result<PosteriorEstimates> {
        match self.config.mode {
            Mode::Filter => {
                self.forward_sweep(false)?;
                self.stats.passes += 1;
            }
            Mode::Smooth => {
                let mut previous: Option<Vec<Vec<C64>>> = None;
                for _ in 0..self.config.passes {
                    self.pass()?;
                    let current = self.estimates();
                    if let Some(prev) = &previous {
                        let change = prev
                            .iter()
                            .flatten()
                            .zip(current.iter().flatten())
                            .map(|(a, b)| (a - b).norm())
                            .fold(0.0, f64::max);
                        if change < self.config.pass_tol {
                            break;
                        }
                    }
                    previous = Some(current);
                }
            }
        }
        self.posteriors()
    }

    /// Current signal estimates, zero for unvisited frames.
    pub fn estimates(&self) -> Vec<Vec<C64>> {
        self.frames.iter().map(|f| f.as_ref().map_or_else(|| vec![ZERO; self.data.dims.n], |s| s.mu.clone())).collect()
    }

    pub fn posteriors(&self) -> Result<PosteriorEstimates> {
        self.posteriors_through(self.data.dims.t)
    }

    /// Posteriors of frames `0..t_end`.
    pub fn posteriors_through(&self, t_end: usize) -> Result<PosteriorEstimates> {
        crate::em::collect_posteriors(&self.msgs, &self.frames, &self.params, t_end)
    }

    /// (across) forward from frame `t`, for callers driving the sweep.
    pub fn propagate_forward(&mut self, t: usize) -> Result<()> {
        self.msgs.step_across_forward(t, &self.params)
    }
}

fn check_inference_params(params: &ModelParams) -> Result<()> {
    params.validate()?;
    if !(params.alpha > 0.0) {
        return Err(Error::InvalidParameter(
            "inference needs alpha > 0 (static amplitudes have no stationary variance)".into(),
        ));
    }
    Ok(())
}

/// Causal estimates from one forward sweep.
pub fn filter(data: &DynamicDataset, params: &ModelParams, config: &SolverConfig) -> Result<PosteriorEstimates> {
    let cfg = SolverConfig { mode: Mode::Filter, ..*config };
    DcsAmp::new(data, *params, cfg)?.run()
}

/// Non-causal estimates from `config.passes` forward/backward passes.
pub fn smooth(data: &DynamicDataset, params: &ModelParams, config: &SolverConfig) -> Result<PosteriorEstimates> {
    let cfg = SolverConfig { mode: Mode::Smooth, ..*config };
    DcsAmp::new(data, *params, cfg)?.run()
}
