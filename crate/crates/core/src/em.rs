//! Posterior summaries from converged messages and EM learning of the model
//! hyperparameters.

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::ampcore::AmpFrameState;
use crate::error::{Error, Result};
use crate::linalg::{dist_sqr, norm_sqr, LinearOperator, C64};
use crate::model::{perturbation_variance, DynamicDataset, ModelParams};
use crate::posterior::PosteriorEstimates;
use crate::scheduler::{gauss_product, DcsAmp, MessageState, Mode, SolverConfig};

const ZERO: C64 = C64::new(0.0, 0.0);
const VAR_FLOOR: f64 = 1e-12;
const ALPHA_FLOOR: f64 = 1e-6;

/// Posterior activity probability of one coefficient.
pub fn support_marginal(lam_fwd: f64, pi_fwd: f64, lam_bwd: f64) -> f64 {
    let on = lam_fwd * pi_fwd * lam_bwd;
    let den = on + (1.0 - lam_fwd) * (1.0 - pi_fwd) * (1.0 - lam_bwd);
    if den == 0.0 {
        warn!("contradictory support beliefs ({lam_fwd}, {pi_fwd}, {lam_bwd}); treating as inactive");
        return 0.0;
    }
    on / den
}

/// Joint posterior `P(s(t) = 1, s(t+1) = 1)` from the messages around the
/// transition factor between frames `t` and `t + 1`.
pub fn support_pairwise(
    lam_fwd_prev: f64,
    pi_fwd_prev: f64,
    pi_fwd_next: f64,
    lam_bwd_next: f64,
    p01: f64,
    p10: f64,
) -> Result<f64> {
    let a1 = lam_fwd_prev * pi_fwd_prev;
    let a0 = (1.0 - lam_fwd_prev) * (1.0 - pi_fwd_prev);
    let b1 = pi_fwd_next * lam_bwd_next;
    let b0 = (1.0 - pi_fwd_next) * (1.0 - lam_bwd_next);
    let j11 = a1 * (1.0 - p01) * b1;
    let j10 = a1 * p01 * b0;
    let j01 = a0 * p10 * b1;
    let j00 = a0 * (1.0 - p10) * b0;
    let total = j11 + j10 + j01 + j00;
    if !(total > 0.0) {
        return Err(Error::DegenerateMessage("pairwise support belief has zero mass".into()));
    }
    Ok(j11 / total)
}

/// Posterior mean and variance of an amplitude from its three incoming
/// Gaussian messages. All-flat input gives `(0, inf)`.
pub fn theta_moments(
    eta_fwd: C64,
    kappa_fwd: f64,
    xi_fwd: C64,
    psi_fwd: f64,
    eta_bwd: C64,
    kappa_bwd: f64,
) -> (C64, f64) {
    let (m, v) = gauss_product(eta_fwd, kappa_fwd, xi_fwd, psi_fwd);
    let (m, v) = gauss_product(m, v, eta_bwd, kappa_bwd);
    (m, v)
}

/// `E[theta(t+1)^* theta(t)]` under the pairwise belief at the amplitude
/// transition factor.
///
/// `(m_prev, v_prev)` is the belief on `theta(t)` excluding that factor,
/// `(m_next, v_next)` the same for `theta(t+1)`.
pub fn theta_crossmoment(m_prev: C64, v_prev: f64, m_next: C64, v_next: f64, params: &ModelParams) -> Result<C64> {
    let a = params.alpha;
    let g = 1.0 - a;
    let q = a * a * params.rho;
    let inv = |v: f64| if v.is_infinite() { 0.0 } else { 1.0 / v };
    let (p1, p2) = (inv(v_prev), inv(v_next));
    let (h1, h2) = (m_prev * p1, m_next * p2);

    // 2x2 precision scaled by q, expanded so that large 1/q terms cancel
    // analytically.
    let det = q * p1 * p2 + p1 + g * g * p2;
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::Singular(format!(
            "pairwise amplitude precision is singular (v_prev={v_prev}, v_next={v_next}, q={q})"
        )));
    }
    let mean_prev = (h1 * (q * p2) + h1 + (m_next - params.zeta * a) * (g * p2)) / det;
    let mean_next = (h2 * (q * p1) + (params.zeta * a + m_prev * g) * p1 + h2 * (g * g)) / det;
    let cross_cov = g / det;
    Ok(mean_next.conj() * mean_prev + cross_cov)
}

/// Posterior summaries for frames `0..t_end` from a message state.
///
/// Forward messages are recomputed from the final outgoing beliefs first,
/// so that the pairwise and single-variable beliefs are mutually consistent.
pub fn collect_posteriors(
    msgs: &MessageState,
    frames: &[Option<AmpFrameState>],
    params: &ModelParams,
    t_end: usize,
) -> Result<PosteriorEstimates> {
    let (n, t_all) = (msgs.n, msgs.t);
    if t_end == 0 || t_end > t_all {
        return Err(Error::Dimension(format!("posterior window of {t_end} frames out of {t_all}")));
    }
    let mut m = msgs.clone();
    m.reset_boundary(params);
    for t in 0..t_end - 1 {
        m.step_across_forward(t, params)?;
    }
    let p10 = params.p10()?;
    let sigma2 = params.sigma2();

    let mut post = PosteriorEstimates::default();
    for t in 0..t_end {
        let frame =
            frames[t].as_ref().ok_or_else(|| Error::InvalidParameter(format!("frame {t} has not been processed")))?;
        post.x_mean.push(frame.mu.clone());
        post.x_var.push(frame.v.clone());
        let mut sp = Vec::with_capacity(n);
        let mut tm = Vec::with_capacity(n);
        let mut tv = Vec::with_capacity(n);
        for k in 0..n {
            let i = m.idx(t, k);
            sp.push(support_marginal(m.lam_fwd[i], m.pi_fwd[i], m.lam_bwd[i]));
            let (mean, var) =
                theta_moments(m.eta_fwd[i], m.kappa_fwd[i], m.xi_fwd[i], m.psi_fwd[i], m.eta_bwd[i], m.kappa_bwd[i]);
            if var.is_infinite() {
                tm.push(params.zeta);
                tv.push(sigma2);
            } else {
                tm.push(mean);
                tv.push(var);
            }
        }
        post.s_prob.push(sp);
        post.theta_mean.push(tm);
        post.theta_var.push(tv);
    }
    for t in 0..t_end.saturating_sub(1) {
        let mut pair = Vec::with_capacity(n);
        let mut cross = Vec::with_capacity(n);
        for k in 0..n {
            let (i, j) = (m.idx(t, k), m.idx(t + 1, k));
            pair.push(support_pairwise(m.lam_fwd[i], m.pi_fwd[i], m.pi_fwd[j], m.lam_bwd[j], params.p01, p10)?);
            let (m1, v1) = gauss_product(m.eta_fwd[i], m.kappa_fwd[i], m.xi_fwd[i], m.psi_fwd[i]);
            let (m2, v2) = gauss_product(m.xi_fwd[j], m.psi_fwd[j], m.eta_bwd[j], m.kappa_bwd[j]);
            cross.push(theta_crossmoment(m1, v1, m2, v2, params)?);
        }
        post.s_pair.push(pair);
        post.theta_cross.push(cross);
    }
    Ok(post)
}

/// Sums over one index set that the closed-form updates need.
#[derive(Clone, Copy, Debug, Default)]
struct SufficientStats {
    count: usize,
    pairs: usize,
    s_first: f64,
    s_prev: f64,
    s_pair: f64,
    mean_first: C64,
    innovation: C64,
    alpha_b: f64,
    alpha_c: f64,
    rho_sum: f64,
}

fn accumulate(post: &PosteriorEstimates, params: &ModelParams, coords: &[usize], t_end: usize) -> SufficientStats {
    let (a, z) = (params.alpha, params.zeta);
    let g = 1.0 - a;
    let mut st =
        SufficientStats { count: coords.len(), pairs: coords.len() * t_end.saturating_sub(1), ..Default::default() };
    for &n in coords {
        st.s_first += post.s_prob[0][n];
        st.mean_first += post.theta_mean[0][n];
    }
    for t in 1..t_end {
        for &n in coords {
            let (mu, mu_p) = (post.theta_mean[t][n], post.theta_mean[t - 1][n]);
            let second = post.theta_var[t][n] + mu.norm_sqr();
            let second_p = post.theta_var[t - 1][n] + mu_p.norm_sqr();
            let cross = post.theta_cross[t - 1][n].re;

            st.s_prev += post.s_prob[t - 1][n];
            st.s_pair += post.s_pair[t - 1][n];
            st.innovation += mu - mu_p * g;
            st.alpha_b += cross - ((mu - mu_p).conj() * z).re - second_p;
            st.alpha_c += second + second_p - 2.0 * cross;
            st.rho_sum += second + a * a * z.norm_sqr() - 2.0 * g * cross - 2.0 * a * (mu.conj() * z).re
                + 2.0 * a * g * (mu_p.conj() * z).re
                + g * g * second_p;
        }
    }
    st
}

/// Applies the six closed-form updates to the sums of one parameter group.
/// Every update reads the current parameters only.
fn update_from_stats(st: &SufficientStats, params: &ModelParams, sigma_e2: f64) -> ModelParams {
    let mut next = *params;
    let count = st.count as f64;
    next.lambda = (st.s_first / count).clamp(0.0, 1.0);

    let k = st.pairs as f64;
    if st.pairs > 0 {
        if st.s_prev > 0.0 {
            next.p01 = ((st.s_prev - st.s_pair) / st.s_prev).clamp(0.0, 1.0);
        }
        let (a, rho) = (params.alpha, params.rho);
        let sigma2 = params.sigma2();
        next.zeta = (st.mean_first / sigma2 + st.innovation / (a * rho)) / (k / rho + count / sigma2);

        let b = 2.0 / rho * st.alpha_b;
        let c = (2.0 / rho * st.alpha_c).max(0.0);
        let alpha = (b + (b * b + 8.0 * k * c).sqrt()) / (4.0 * k);
        next.alpha = if alpha.is_finite() { alpha.clamp(ALPHA_FLOOR, 1.0) } else { params.alpha };

        let new_rho = st.rho_sum / (a * a * k);
        next.rho = if new_rho.is_finite() && new_rho > VAR_FLOOR {
            new_rho
        } else {
            warn!("rho update {new_rho} clamped to {VAR_FLOOR}");
            VAR_FLOOR
        };
    } else {
        next.zeta = st.mean_first / count;
    }
    // keep p10 a probability
    if next.lambda > 0.0 {
        next.p01 = next.p01.min((1.0 - next.lambda) / next.lambda);
    }
    next.sigma_e2 = sigma_e2;
    next
}

fn noise_update(data: &DynamicDataset, post: &PosteriorEstimates, t_end: usize) -> f64 {
    let mut total = 0.0;
    let mut ax = vec![ZERO; data.dims.m];
    for t in 0..t_end {
        data.operator(t).apply(&post.x_mean[t], &mut ax);
        total += dist_sqr(&data.y[t], &ax) + post.x_var[t].iter().sum::<f64>();
    }
    let v = total / (t_end * data.dims.m) as f64;
    if v > VAR_FLOOR {
        v
    } else {
        warn!("noise variance update {v} clamped to {VAR_FLOOR}");
        VAR_FLOOR
    }
}

fn check_posteriors(post: &PosteriorEstimates, data: &DynamicDataset, t_end: usize) -> Result<()> {
    if post.frames() < t_end || post.s_prob.len() < t_end || post.s_pair.len() + 1 < t_end {
        return Err(Error::Dimension(format!("posteriors cover fewer than {t_end} frames")));
    }
    if post.dim() != data.dims.n {
        return Err(Error::Dimension(format!("posteriors have N={}, data has N={}", post.dim(), data.dims.n)));
    }
    Ok(())
}

/// One EM step over all frames.
pub fn em_update(data: &DynamicDataset, post: &PosteriorEstimates, params: &ModelParams) -> Result<ModelParams> {
    em_update_prefix(data, post, params, data.dims.t)
}

/// One EM step that only looks at frames `0..t_end`.
pub fn em_update_prefix(
    data: &DynamicDataset,
    post: &PosteriorEstimates,
    params: &ModelParams,
    t_end: usize,
) -> Result<ModelParams> {
    check_posteriors(post, data, t_end)?;
    let coords: Vec<usize> = (0..data.dims.n).collect();
    let st = accumulate(post, params, &coords, t_end);
    let next = update_from_stats(&st, params, noise_update(data, post, t_end));
    next.validate()?;
    Ok(next)
}

/// EM step with separate signal parameters per coefficient group.
///
/// `groups[n]` names the group of coefficient `n`; `params[g]` holds that
/// group's current values. The noise variance is shared by all groups.
pub fn em_update_partitioned(
    data: &DynamicDataset,
    post: &PosteriorEstimates,
    params: &[ModelParams],
    groups: &[usize],
) -> Result<Vec<ModelParams>> {
    let t_end = data.dims.t;
    check_posteriors(post, data, t_end)?;
    if groups.len() != data.dims.n {
        return Err(Error::Dimension(format!("{} group labels for N={}", groups.len(), data.dims.n)));
    }
    let mut members = vec![Vec::new(); params.len()];
    for (n, &g) in groups.iter().enumerate() {
        members.get_mut(g).ok_or_else(|| Error::InvalidParameter(format!("group {g} has no parameters")))?.push(n);
    }
    let sigma_e2 = noise_update(data, post, t_end);
    members
        .iter()
        .zip(params)
        .map(|(coords, p)| {
            if coords.is_empty() {
                return Ok(ModelParams { sigma_e2, ..*p });
            }
            let next = update_from_stats(&accumulate(post, p, coords, t_end), p, sigma_e2);
            next.validate()?;
            Ok(next)
        })
        .collect()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Sparsity ratio `K/M` at the LASSO phase transition for undersampling `delta`.
pub fn lasso_phase_transition(delta: f64) -> f64 {
    let objective = |z: f64| {
        let tail = (1.0 + z * z) * std_normal_cdf(-z) - z * std_normal_pdf(z);
        (1.0 - 2.0 / delta * tail) / (1.0 + z * z - 2.0 * tail)
    };
    // unimodal in z; coarse scan then golden-section refinement
    let zs: Vec<f64> = (1..=200).map(|i| i as f64 * 0.05).collect();
    let best = zs.iter().copied().max_by(|a, b| objective(*a).total_cmp(&objective(*b))).unwrap_or(1.0);
    let (mut lo, mut hi) = ((best - 0.05).max(1e-9), best + 0.05);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let m1 = hi - r * (hi - lo);
        let m2 = lo + r * (hi - lo);
        if objective(m1) < objective(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    objective(0.5 * (lo + hi)).clamp(0.0, 1.0)
}

/// Data-driven starting point for EM.
pub fn init_heuristics(data: &DynamicDataset) -> Result<ModelParams> {
    let (n, m, t) = (data.dims.n as f64, data.dims.m as f64, data.dims.t);
    let energy: f64 = data.y.iter().map(|y| norm_sqr(y)).sum();
    if !(energy > 0.0) {
        return Err(Error::InvalidParameter("measurements carry no energy".into()));
    }
    let delta = m / n;
    let lambda = (delta * lasso_phase_transition(delta)).clamp(0.10, 0.90);
    // assume 20 dB to start
    let sigma_e2 = energy / (t as f64 * m) / 101.0;
    let sigma2 = ((energy / t as f64 - m * sigma_e2) / (n * lambda)).max(VAR_FLOOR);

    let alpha = if t > 1 {
        let mut acc = 0.0;
        let mut used = 0usize;
        for k in 0..t - 1 {
            let num = crate::linalg::inner(&data.y[k], &data.y[k + 1]).norm();
            let tr = data.operator(k).trace_with_adjoint(data.operator(k + 1)).norm();
            if tr > 0.0 {
                acc += num / (lambda * sigma2 * tr);
                used += 1;
            }
        }
        if used > 0 {
            1.0 - acc / used as f64
        } else {
            0.99
        }
    } else {
        0.99
    };
    let alpha = if alpha.is_finite() { alpha.clamp(1e-3, 0.99) } else { 0.99 };
    let params =
        ModelParams { lambda, p01: 0.10, zeta: ZERO, alpha, rho: perturbation_variance(alpha, sigma2)?, sigma_e2 };
    params.validate()?;
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once no parameter moves by more than this, relatively.
    pub rel_tol: f64,
    /// Consecutive worsening iterations tolerated before giving up.
    pub patience: usize,
    pub solver: SolverConfig,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 300, rel_tol: 1e-5, patience: 10, solver: SolverConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmIteration {
    pub iteration: usize,
    /// Parameters after this iteration's update.
    pub params: ModelParams,
    /// `sum ||y - A x||^2 / sum ||y||^2` under the pass that fed the update.
    pub residual: f64,
    pub tnmse_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub initial: ModelParams,
    pub iterations: Vec<EmIteration>,
    pub stop: StopReason,
}

#[derive(Clone, Debug)]
pub struct EmOutcome {
    pub posteriors: PosteriorEstimates,
    pub params: ModelParams,
    pub trace: EmTrace,
}

fn relative_change(a: &ModelParams, b: &ModelParams) -> f64 {
    let rel = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(1e-12);
    let z = (a.zeta - b.zeta).norm() / a.zeta.norm().max(b.zeta.norm()).max(1e-12);
    [
        rel(a.lambda, b.lambda),
        rel(a.p01, b.p01),
        z,
        rel(a.alpha, b.alpha),
        rel(a.rho, b.rho),
        rel(a.sigma_e2, b.sigma_e2),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

fn residual_ratio(data: &DynamicDataset, x: &[Vec<C64>], t_end: usize) -> f64 {
    let mut ax = vec![ZERO; data.dims.m];
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..t_end {
        data.operator(t).apply(&x[t], &mut ax);
        num += dist_sqr(&data.y[t], &ax);
        den += norm_sqr(&data.y[t]);
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn truth_tnmse_db(data: &DynamicDataset, x: &[Vec<C64>]) -> Option<f64> {
    let truth = data.truth.as_ref()?;
    crate::harness::tnmse(&truth.x, x).ok().map(crate::harness::to_db)
}

/// Alternates one smoothing pass with one EM update.
pub fn em_loop(data: &DynamicDataset, init: &ModelParams, config: &EmConfig) -> Result<EmOutcome> {
    let solver_cfg = SolverConfig { mode: Mode::Smooth, ..config.solver };
    if config.max_iters == 0 {
        let posteriors = DcsAmp::new(data, *init, solver_cfg)?.run()?;
        return Ok(EmOutcome {
            posteriors,
            params: *init,
            trace: EmTrace { initial: *init, iterations: Vec::new(), stop: StopReason::MaxIterations },
        });
    }

    let mut solver = DcsAmp::new(data, *init, solver_cfg)?;
    let mut params = *init;
    let mut iterations = Vec::new();
    let mut best: Option<(f64, PosteriorEstimates, ModelParams)> = None;
    let mut worse_streak = 0usize;
    let mut last_residual = f64::INFINITY;
    let mut stop = StopReason::MaxIterations;
    let mut posteriors = PosteriorEstimates::default();

    for k in 0..config.max_iters {
        solver.pass()?;
        posteriors = solver.posteriors()?;
        let residual = residual_ratio(data, &posteriors.x_mean, data.dims.t);
        let next = em_update(data, &posteriors, &params)?;
        iterations.push(EmIteration {
            iteration: k + 1,
            params: next,
            residual,
            tnmse_db: truth_tnmse_db(data, &posteriors.x_mean),
        });
        debug!("EM iteration {}: residual {residual:.3e}, {next:?}", k + 1);

        if best.as_ref().is_none_or(|(r, _, _)| residual < *r) {
            best = Some((residual, posteriors.clone(), params));
        }
        worse_streak = if residual > last_residual { worse_streak + 1 } else { 0 };
        last_residual = residual;
        if worse_streak >= config.patience {
            warn!("EM residual worsened for {worse_streak} iterations; keeping best iterate");
            stop = StopReason::Diverged;
            break;
        }

        let change = relative_change(&params, &next);
        params = next;
        solver.set_params(params)?;
        if change < config.rel_tol {
            stop = StopReason::Converged;
            break;
        }
    }

    if stop == StopReason::Diverged {
        if let Some((_, post, p)) = best {
            posteriors = post;
            params = p;
        }
    }
    Ok(EmOutcome { posteriors, params, trace: EmTrace { initial: *init, iterations, stop } })
}

/// Causal EM: after each new frame the parameters are re-estimated from the
/// filtered beliefs of all frames seen so far. Updates start once
/// `warmup` frames are available.
pub fn filter_em(data: &DynamicDataset, init: &ModelParams, solver: &SolverConfig, warmup: usize) -> Result<EmOutcome> {
    let cfg = SolverConfig { mode: Mode::Filter, ..*solver };
    let mut dcs = DcsAmp::new(data, *init, cfg)?;
    let mut params = *init;
    let mut iterations = Vec::new();
    let t_all = data.dims.t;
    for t in 0..t_all {
        dcs.visit(t)?;
        if t + 1 >= warmup.max(2) {
            let post = dcs.posteriors_through(t + 1)?;
            let next = em_update_prefix(data, &post, &params, t + 1)?;
            iterations.push(EmIteration {
                iteration: t + 1,
                params: next,
                residual: residual_ratio(data, &post.x_mean, t + 1),
                tnmse_db: None,
            });
            params = next;
            dcs.set_params(params)?;
        }
        if t + 1 < t_all {
            dcs.propagate_forward(t)?;
        }
    }
    dcs.messages().check_probabilities()?;
    Ok(EmOutcome {
        posteriors: dcs.posteriors()?,
        params,
        trace: EmTrace { initial: *init, iterations, stop: StopReason::MaxIterations },
    })
}
