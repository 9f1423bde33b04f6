//! Support-aware Gaussian oracles.
//!
//! With the support fixed, the model is jointly Gaussian in the amplitudes,
//! so the posterior mean is available by Gaussian message passing
//! ([`sks_estimate`], [`skf_estimate`]), by a preconditioned conjugate
//! gradient solve ([`sks_estimate_cg`]) or, for small problems, by a dense
//! solve ([`exact_mmse_small`]).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{norm_sqr, DenseMatrix, LinearOperator, C64};
use crate::model::{DynamicDataset, ModelParams};
use crate::posterior::PosteriorEstimates;
use crate::scheduler::{across_amplitude_backward, across_amplitude_forward, gauss_product};

const ZERO: C64 = C64::new(0.0, 0.0);

/// A dataset together with its known support.
#[derive(Clone, Copy, Debug)]
pub struct OracleProblem<'a> {
    pub data: &'a DynamicDataset,
    pub support: &'a [Vec<bool>],
    pub params: ModelParams,
}

impl<'a> OracleProblem<'a> {
    pub fn new(data: &'a DynamicDataset, support: &'a [Vec<bool>], params: ModelParams) -> Result<Self> {
        let problem = Self { data, support, params };
        problem.validate()?;
        Ok(problem)
    }

    /// Uses the support recorded in the dataset's ground truth.
    pub fn from_truth(data: &'a DynamicDataset, params: ModelParams) -> Result<Self> {
        let truth = data.truth.as_ref().ok_or_else(|| Error::InvalidParameter("dataset has no ground truth".into()))?;
        Self::new(data, &truth.s, params)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.data.dims;
        if self.support.len() != d.t || self.support.iter().any(|s| s.len() != d.n) {
            return Err(Error::Dimension(format!("support shape does not match N={}, T={}", d.n, d.t)));
        }
        self.params.validate()?;
        if !(self.params.alpha > 0.0) {
            return Err(Error::InvalidParameter("oracle needs alpha > 0".into()));
        }
        Ok(())
    }

    fn active(&self, t: usize) -> Vec<usize> {
        self.support[t].iter().enumerate().filter(|(_, &s)| s).map(|(n, _)| n).collect()
    }
}

/// Per-frame data restricted to the support.
struct FrameSystem {
    active: Vec<usize>,
    a_s: DenseMatrix,
    gram: DMatrix<C64>,
    matched: Vec<C64>,
}

impl FrameSystem {
    fn new(problem: &OracleProblem, t: usize) -> Result<Self> {
        let active = problem.active(t);
        let a = problem.data.operator(t);
        let m = problem.data.dims.m;
        let k = active.len();
        let mut cols = Vec::with_capacity(m * k);
        for r in 0..m {
            let row = a.row(r);
            cols.extend(active.iter().map(|&n| row[n]));
        }
        let a_s = DenseMatrix::from_row_major(m, k, cols)?;
        let mut gram = DMatrix::<C64>::zeros(k, k);
        for r in 0..m {
            let row = a_s.row(r);
            for i in 0..k {
                let ci = row[i].conj();
                for j in i..k {
                    gram[(i, j)] += ci * row[j];
                }
            }
        }
        for i in 0..k {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)].conj();
            }
        }
        let mut matched = vec![ZERO; k];
        a_s.apply_adjoint(&problem.data.y[t], &mut matched);
        Ok(Self { active, a_s, gram, matched })
    }

    /// Exact Gaussian posterior of the active amplitudes under independent
    /// priors `CN(mean[i], var[i])`. Returns marginal means and variances.
    fn solve(&self, mean: &[C64], var: &[f64], sigma_e2: f64) -> Result<(Vec<C64>, Vec<f64>)> {
        let k = self.active.len();
        let mut prec = self.gram.map(|g| g / sigma_e2);
        let mut h = DVector::<C64>::zeros(k);
        for i in 0..k {
            let p = if var[i].is_infinite() { 0.0 } else { 1.0 / var[i] };
            prec[(i, i)] += p;
            h[i] = mean[i] * p + self.matched[i] / sigma_e2;
        }
        let chol = prec.cholesky().ok_or_else(|| Error::Singular("frame precision is not positive definite".into()))?;
        let m = chol.solve(&h);
        let inv = chol.inverse();
        Ok((m.iter().copied().collect(), (0..k).map(|i| inv[(i, i)].re).collect()))
    }
}

/// Per-coordinate Gaussian messages on the amplitude chains, `[t][n]`.
struct ChainMessages {
    fwd: Vec<Vec<(C64, f64)>>,
    bwd: Vec<Vec<(C64, f64)>>,
    evidence: Vec<Vec<(C64, f64)>>,
}

impl ChainMessages {
    fn new(n: usize, t: usize, params: &ModelParams) -> Self {
        let flat = (ZERO, f64::INFINITY);
        let mut fwd = vec![vec![flat; n]; t];
        fwd[0] = vec![(params.zeta, params.sigma2()); n];
        Self { fwd, bwd: vec![vec![flat; n]; t], evidence: vec![vec![flat; n]; t] }
    }

    fn belief(&self, t: usize, n: usize) -> (C64, f64) {
        let (f, b, e) = (self.fwd[t][n], self.bwd[t][n], self.evidence[t][n]);
        let (m, v) = gauss_product(f.0, f.1, b.0, b.1);
        gauss_product(m, v, e.0, e.1)
    }
}

/// Refreshes the frame-to-amplitude messages of frame `t`; returns the
/// frame's marginal means for the active coordinates.
fn update_frame(sys: &FrameSystem, msgs: &mut ChainMessages, t: usize, sigma_e2: f64) -> Result<Vec<C64>> {
    if sys.active.is_empty() {
        return Ok(Vec::new());
    }
    let (prior_m, prior_v): (Vec<C64>, Vec<f64>) = sys
        .active
        .iter()
        .map(|&n| {
            let (f, b) = (msgs.fwd[t][n], msgs.bwd[t][n]);
            gauss_product(f.0, f.1, b.0, b.1)
        })
        .unzip();
    let (m, v) = sys.solve(&prior_m, &prior_v, sigma_e2)?;
    for (i, &n) in sys.active.iter().enumerate() {
        let p_prior = if prior_v[i].is_infinite() { 0.0 } else { 1.0 / prior_v[i] };
        let q = 1.0 / v[i] - p_prior;
        msgs.evidence[t][n] = if q > 0.0 && q.is_finite() {
            ((m[i] / v[i] - prior_m[i] * p_prior) / q, 1.0 / q)
        } else {
            (ZERO, f64::INFINITY)
        };
    }
    Ok(m)
}

fn forward_message(msgs: &mut ChainMessages, t: usize, params: &ModelParams) {
    for n in 0..msgs.fwd[t].len() {
        let (f, e) = (msgs.fwd[t][n], msgs.evidence[t][n]);
        msgs.fwd[t + 1][n] = across_amplitude_forward(f.0, f.1, e.0, e.1, params);
    }
}

fn backward_message(msgs: &mut ChainMessages, t: usize, params: &ModelParams) {
    for n in 0..msgs.bwd[t].len() {
        let (b, e) = (msgs.bwd[t + 1][n], msgs.evidence[t + 1][n]);
        msgs.bwd[t][n] = across_amplitude_backward(b.0, b.1, e.0, e.1, params);
    }
}

fn estimates_from_beliefs(problem: &OracleProblem, msgs: &ChainMessages) -> PosteriorEstimates {
    let d = problem.data.dims;
    let mut post = PosteriorEstimates::default();
    for t in 0..d.t {
        let (mut xm, mut xv, mut tm, mut tv, mut sp) = (vec![ZERO; d.n], vec![0.0; d.n], vec![], vec![], vec![]);
        for n in 0..d.n {
            let (m, v) = msgs.belief(t, n);
            if problem.support[t][n] {
                xm[n] = m;
                xv[n] = v;
            }
            tm.push(m);
            tv.push(v);
            sp.push(if problem.support[t][n] { 1.0 } else { 0.0 });
        }
        post.x_mean.push(xm);
        post.x_var.push(xv);
        post.theta_mean.push(tm);
        post.theta_var.push(tv);
        post.s_prob.push(sp);
    }
    post.s_pair = pair_indicators(problem.support);
    post
}

fn pair_indicators(support: &[Vec<bool>]) -> Vec<Vec<f64>> {
    support
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(&a, &b)| if a && b { 1.0 } else { 0.0 }).collect())
        .collect()
}

/// Support-aware smoother: loopy Gaussian belief propagation with each
/// frame's likelihood as one cluster, swept forward then backward until no
/// posterior mean moves by more than `tol`.
pub fn sks_estimate(problem: &OracleProblem, max_iters: usize, tol: f64) -> Result<PosteriorEstimates> {
    problem.validate()?;
    let d = problem.data.dims;
    let p = &problem.params;
    let systems = (0..d.t).map(|t| FrameSystem::new(problem, t)).collect::<Result<Vec<_>>>()?;
    let mut msgs = ChainMessages::new(d.n, d.t, p);
    let mut means: Vec<Vec<C64>> = vec![Vec::new(); d.t];
    let mut change = f64::INFINITY;
    for _ in 0..max_iters.max(1) {
        let mut new_means = vec![Vec::new(); d.t];
        for t in 0..d.t {
            new_means[t] = update_frame(&systems[t], &mut msgs, t, p.sigma_e2)?;
            if t + 1 < d.t {
                forward_message(&mut msgs, t, p);
            }
        }
        for t in (0..d.t.saturating_sub(1)).rev() {
            backward_message(&mut msgs, t, p);
            new_means[t] = update_frame(&systems[t], &mut msgs, t, p.sigma_e2)?;
        }
        change = new_means
            .iter()
            .zip(&means)
            .map(|(a, b)| {
                if a.len() != b.len() {
                    return f64::INFINITY;
                }
                a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        means = new_means;
        if change < tol {
            return Ok(estimates_from_beliefs(problem, &msgs));
        }
    }
    Err(Error::NoConvergence { iterations: max_iters, residual: change })
}

/// Support-aware filter: a single forward sweep, so the estimate at `t` only
/// depends on measurements up to `t`.
pub fn skf_estimate(problem: &OracleProblem) -> Result<PosteriorEstimates> {
    problem.validate()?;
    let d = problem.data.dims;
    let p = &problem.params;
    let mut msgs = ChainMessages::new(d.n, d.t, p);
    for t in 0..d.t {
        let sys = FrameSystem::new(problem, t)?;
        update_frame(&sys, &mut msgs, t, p.sigma_e2)?;
        if t + 1 < d.t {
            forward_message(&mut msgs, t, p);
        }
    }
    Ok(estimates_from_beliefs(problem, &msgs))
}

/// Solves `J u = b` for one coordinate's tridiagonal chain matrix with real
/// diagonal `diag` and constant real off-diagonal `off`.
fn thomas(diag: &[f64], off: f64, rhs: &mut [C64], scratch: &mut [f64]) {
    let t = diag.len();
    scratch[0] = diag[0];
    for k in 1..t {
        let w = off / scratch[k - 1];
        scratch[k] = diag[k] - w * off;
        let carry = rhs[k - 1] * w;
        rhs[k] -= carry;
    }
    rhs[t - 1] /= scratch[t - 1];
    for k in (0..t - 1).rev() {
        rhs[k] = (rhs[k] - rhs[k + 1] * off) / scratch[k];
    }
}

/// Diagonal of the prior precision of one amplitude chain and its constant
/// off-diagonal.
fn chain_precision(params: &ModelParams, t: usize) -> (Vec<f64>, f64) {
    let g = 1.0 - params.alpha;
    let q = params.alpha * params.alpha * params.rho;
    let mut diag = vec![(1.0 + g * g) / q; t];
    diag[0] = 1.0 / params.sigma2() + if t > 1 { g * g / q } else { 0.0 };
    if t > 1 {
        diag[t - 1] = 1.0 / q;
    }
    (diag, -g / q)
}

/// Support-aware smoother posterior means from a preconditioned conjugate
/// gradient solve of the joint normal equations. Cheaper than
/// [`sks_estimate`] at scale; posterior variances are not computed.
pub fn sks_estimate_cg(problem: &OracleProblem, max_iters: usize, tol: f64) -> Result<PosteriorEstimates> {
    problem.validate()?;
    let d = problem.data.dims;
    let p = &problem.params;
    let (n, tt, m) = (d.n, d.t, d.m);
    let systems = (0..tt).map(|t| FrameSystem::new(problem, t)).collect::<Result<Vec<_>>>()?;
    let (prior_diag, off) = chain_precision(p, tt);
    let inv_noise = 1.0 / p.sigma_e2;

    // Unknowns are theta - zeta, laid out [t * N + n].
    let idx = |t: usize, k: usize| t * n + k;
    let apply = |x: &[C64], out: &mut [C64]| {
        for k in 0..n {
            for t in 0..tt {
                let mut acc = x[idx(t, k)] * prior_diag[t];
                if t > 0 {
                    acc += x[idx(t - 1, k)] * off;
                }
                if t + 1 < tt {
                    acc += x[idx(t + 1, k)] * off;
                }
                out[idx(t, k)] = acc;
            }
        }
        let mut ax = vec![ZERO; m];
        for (t, sys) in systems.iter().enumerate() {
            let xs: Vec<C64> = sys.active.iter().map(|&k| x[idx(t, k)]).collect();
            sys.a_s.apply(&xs, &mut ax);
            let mut back = vec![ZERO; xs.len()];
            sys.a_s.apply_adjoint(&ax, &mut back);
            for (&k, b) in sys.active.iter().zip(back) {
                out[idx(t, k)] += b * inv_noise;
            }
        }
    };

    // Chain-tridiagonal preconditioner with the Gram diagonal folded in.
    let mut pre_diag = vec![prior_diag.clone(); n];
    for (t, sys) in systems.iter().enumerate() {
        for (i, &k) in sys.active.iter().enumerate() {
            pre_diag[k][t] += sys.gram[(i, i)].re * inv_noise;
        }
    }
    let precondition = |r: &[C64], z: &mut [C64]| {
        let mut col = vec![ZERO; tt];
        let mut scratch = vec![0.0; tt];
        for k in 0..n {
            for t in 0..tt {
                col[t] = r[idx(t, k)];
            }
            thomas(&pre_diag[k], off, &mut col, &mut scratch);
            for t in 0..tt {
                z[idx(t, k)] = col[t];
            }
        }
    };

    // b = sum_t P_t^T A_S^H (y - A_S zeta) / sigma_e2
    let mut b = vec![ZERO; n * tt];
    let mut ax = vec![ZERO; m];
    for (t, sys) in systems.iter().enumerate() {
        let zs = vec![p.zeta; sys.active.len()];
        sys.a_s.apply(&zs, &mut ax);
        let resid: Vec<C64> = problem.data.y[t].iter().zip(&ax).map(|(y, a)| y - a).collect();
        let mut back = vec![ZERO; sys.active.len()];
        sys.a_s.apply_adjoint(&resid, &mut back);
        for (&k, v) in sys.active.iter().zip(back) {
            b[idx(t, k)] = v * inv_noise;
        }
    }

    let b_norm = norm_sqr(&b).sqrt();
    let mut x = vec![ZERO; n * tt];
    let mut converged = b_norm == 0.0;
    let mut r = b.clone();
    let mut z = vec![ZERO; n * tt];
    precondition(&r, &mut z);
    let mut dir = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, c)| (a.conj() * c).re).sum();
    let mut kd = vec![ZERO; n * tt];
    let mut rel = 1.0;
    for _ in 0..max_iters {
        if converged {
            break;
        }
        apply(&dir, &mut kd);
        let curv: f64 = dir.iter().zip(&kd).map(|(a, c)| (a.conj() * c).re).sum();
        if !(curv > 0.0) {
            return Err(Error::Singular("joint precision is not positive definite".into()));
        }
        let step = rz / curv;
        for i in 0..x.len() {
            x[i] += dir[i] * step;
            r[i] -= kd[i] * step;
        }
        rel = norm_sqr(&r).sqrt() / b_norm;
        if rel < tol {
            converged = true;
            break;
        }
        precondition(&r, &mut z);
        let rz_next: f64 = r.iter().zip(&z).map(|(a, c)| (a.conj() * c).re).sum();
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..dir.len() {
            dir[i] = z[i] + dir[i] * beta;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: max_iters, residual: rel });
    }

    let mut post = PosteriorEstimates::default();
    for t in 0..tt {
        let theta: Vec<C64> = (0..n).map(|k| x[idx(t, k)] + p.zeta).collect();
        post.x_mean.push((0..n).map(|k| if problem.support[t][k] { theta[k] } else { ZERO }).collect());
        post.s_prob.push(problem.support[t].iter().map(|&s| if s { 1.0 } else { 0.0 }).collect());
        post.theta_mean.push(theta);
    }
    post.s_pair = pair_indicators(problem.support);
    Ok(post)
}

/// Largest problem accepted by [`exact_mmse_small`], counted in amplitudes.
pub const EXACT_MAX_UNKNOWNS: usize = 64;

/// Exact posterior by a dense solve over all `N T` amplitudes.
///
/// The prior covariance `sigma^2 (1 - alpha)^{|t - s|}` per coordinate is
/// inverted numerically, so this shares no chain algebra with the message
/// passing oracles.
pub fn exact_mmse_small(problem: &OracleProblem) -> Result<PosteriorEstimates> {
    problem.validate()?;
    let d = problem.data.dims;
    let p = &problem.params;
    let (n, tt) = (d.n, d.t);
    let dim = n * tt;
    if dim > EXACT_MAX_UNKNOWNS {
        return Err(Error::InvalidParameter(format!("{dim} unknowns exceed the dense limit of {EXACT_MAX_UNKNOWNS}")));
    }
    let idx = |t: usize, k: usize| t * n + k;
    let g = 1.0 - p.alpha;
    let sigma2 = p.sigma2();
    let mut cov = DMatrix::<C64>::zeros(dim, dim);
    for k in 0..n {
        for t in 0..tt {
            for s in 0..tt {
                let lag = (t as i32 - s as i32).unsigned_abs() as i32;
                cov[(idx(t, k), idx(s, k))] = C64::new(sigma2 * g.powi(lag), 0.0);
            }
        }
    }
    let prior_prec = cov.cholesky().ok_or_else(|| Error::Singular("prior covariance is singular".into()))?.inverse();

    let mut prec = prior_prec.clone();
    let mut h = &prior_prec * DVector::from_element(dim, p.zeta);
    for t in 0..tt {
        let a = problem.data.operator(t);
        let active = problem.active(t);
        for &i in &active {
            for &j in &active {
                let gij: C64 = (0..d.m).map(|r| a.get(r, i).conj() * a.get(r, j)).sum();
                prec[(idx(t, i), idx(t, j))] += gij / p.sigma_e2;
            }
            let mi: C64 = (0..d.m).map(|r| a.get(r, i).conj() * problem.data.y[t][r]).sum();
            h[idx(t, i)] += mi / p.sigma_e2;
        }
    }
    let chol = prec.cholesky().ok_or_else(|| Error::Singular("posterior precision is not positive definite".into()))?;
    let mean = chol.solve(&h);
    let post_cov = chol.inverse();

    let mut post = PosteriorEstimates::default();
    for t in 0..tt {
        let s = &problem.support[t];
        post.theta_mean.push((0..n).map(|k| mean[idx(t, k)]).collect());
        post.theta_var.push((0..n).map(|k| post_cov[(idx(t, k), idx(t, k))].re).collect());
        post.x_mean.push((0..n).map(|k| if s[k] { mean[idx(t, k)] } else { ZERO }).collect());
        post.x_var.push((0..n).map(|k| if s[k] { post_cov[(idx(t, k), idx(t, k))].re } else { 0.0 }).collect());
        post.s_prob.push(s.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    }
    for t in 0..tt.saturating_sub(1) {
        post.theta_cross.push(
            (0..n)
                .map(|k| post_cov[(idx(t, k), idx(t + 1, k))] + mean[idx(t + 1, k)].conj() * mean[idx(t, k)])
                .collect(),
        );
    }
    post.s_pair = pair_indicators(problem.support);
    Ok(post)
}
