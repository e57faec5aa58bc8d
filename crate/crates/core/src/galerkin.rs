//! Model-based projected equations and analytic reference values.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::Basis;
use crate::dynamics::{ou_transition_moments, DynamicsModel};
use crate::error::{Error, Result};
use crate::estimators::{model_mu_sigma_hat, TransitionMomentProvider};
use crate::fdcoeff::FdCoefficients;
use crate::metrics::ValueFunction;
use crate::quadrature::{gauss_hermite, Quadrature, Weight};

/// Largest condition number a solve accepts.
pub const MAX_CONDITION: f64 = 1e12;

/// Nodes per assembly block; bounds scratch memory for Monte Carlo rules.
const BLOCK: usize = 2048;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: b.len(),
            });
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear system"));
        }
        Ok(LinearSystem { a, b })
    }

    /// 2-norm condition number from the singular values.
    pub fn condition(&self) -> f64 {
        condition_number(&self.a)
    }
}

pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub condition: f64,
    /// `||A theta - b||` of the system actually solved.
    pub residual: f64,
    /// Number of absorbed windows for data-driven systems, 0 otherwise.
    pub count: usize,
}

/// `V(s) = Phi(s)^T theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueApprox {
    pub theta: DVector<f64>,
    pub basis: Basis,
    pub diagnostics: SolveDiagnostics,
}

impl ValueApprox {
    pub fn value(&self, s: &[f64]) -> f64 {
        let mut phi = vec![0.0; self.basis.len()];
        self.basis.values_into(s, &mut phi);
        phi.iter().zip(self.theta.iter()).map(|(p, t)| p * t).sum()
    }

    pub fn gradient(&self, s: &[f64]) -> Result<Vec<f64>> {
        let e = self.basis.eval(s)?;
        let d = e.dim;
        let mut g = vec![0.0; d];
        for (k, t) in self.theta.iter().enumerate() {
            for (gi, v) in g.iter_mut().zip(e.grad_of(k)) {
                *gi += t * v;
            }
        }
        Ok(g)
    }

    /// Row-major `d x d`.
    pub fn hessian(&self, s: &[f64]) -> Result<Vec<f64>> {
        let e = self.basis.eval(s)?;
        let d = e.dim;
        let mut h = vec![0.0; d * d];
        for (k, t) in self.theta.iter().enumerate() {
            for (hi, v) in h.iter_mut().zip(e.hess_of(k)) {
                *hi += t * v;
            }
        }
        Ok(h)
    }
}

impl ValueFunction for ValueApprox {
    fn value(&self, s: &[f64]) -> f64 {
        ValueApprox::value(self, s)
    }
}

/// Solves with column-pivoted QR after a conditioning check.
pub fn solve(system: &LinearSystem, basis: &Basis) -> Result<ValueApprox> {
    solve_counted(system, basis, 0)
}

pub(crate) fn solve_counted(system: &LinearSystem, basis: &Basis, count: usize) -> Result<ValueApprox> {
    if system.b.len() != basis.len() {
        return Err(Error::DimensionMismatch {
            expected: basis.len(),
            got: system.b.len(),
        });
    }
    let condition = system.condition();
    if !(condition <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition, count });
    }
    let theta = system
        .a
        .clone()
        .col_piv_qr()
        .solve(&system.b)
        .ok_or(Error::IllConditioned { condition, count })?;
    let residual = (&system.a * &theta - &system.b).norm();
    let scale = system.a.norm() * theta.norm() + system.b.norm();
    if !residual.is_finite() || residual > 1e-8 * scale {
        return Err(Error::IllConditioned { condition, count });
    }
    Ok(ValueApprox {
        theta,
        basis: basis.clone(),
        diagnostics: SolveDiagnostics {
            condition,
            residual,
            count,
        },
    })
}

/// Drift and optional diffusion (row-major) at a state.
pub type LocalDynamics = (Vec<f64>, Option<Vec<f64>>);

/// `A[k][l] = int (beta phi_l - mu . grad phi_l - 1/2 Sigma : Hess phi_l) phi_k w ds`,
/// `b[k] = int r phi_k w ds`, with `(mu, Sigma)` supplied per node.
pub fn assemble_generator<F>(
    basis: &Basis,
    quad: &Quadrature,
    weight: &Weight,
    beta: f64,
    reward: &(dyn Fn(&[f64]) -> f64 + Sync),
    local: F,
) -> Result<LinearSystem>
where
    F: Fn(&[f64]) -> Result<LocalDynamics>,
{
    check_domain(basis, quad)?;
    let p = basis.len();
    let mut gen = vec![0.0; p];
    assemble_blocks(basis, quad, weight, reward, 1.0, |s, phi, out| {
        let (mu, sigma) = local(s)?;
        basis.shifted_generator_into(s, beta, &mu, sigma.as_deref(), phi, &mut gen);
        out.copy_from_slice(&gen);
        Ok(())
    })
}

/// Galerkin system of the order-`i` surrogate equation
/// `beta V = r + mu_hat . grad V + 1/2 Sigma_hat : Hess V`. With `diffusion`
/// false the second-order term is dropped, as for deterministic dynamics.
#[allow(clippy::too_many_arguments)]
pub fn assemble_phibe<P: TransitionMomentProvider + ?Sized>(
    basis: &Basis,
    provider: &P,
    beta: f64,
    dt: f64,
    coeffs: &FdCoefficients,
    quad: &Quadrature,
    weight: &Weight,
    reward: &(dyn Fn(&[f64]) -> f64 + Sync),
    diffusion: bool,
) -> Result<LinearSystem> {
    check_positive("beta", beta)?;
    check_positive("dt", dt)?;
    assemble_generator(basis, quad, weight, beta, reward, |s| {
        let est = model_mu_sigma_hat(provider, s, dt, coeffs)?;
        Ok((est.mu, diffusion.then_some(est.sigma)))
    })
}

/// Galerkin system of the continuous-time equation with the true generator.
pub fn assemble_exact(
    basis: &Basis,
    model: &DynamicsModel,
    beta: f64,
    quad: &Quadrature,
    weight: &Weight,
    reward: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<LinearSystem> {
    check_positive("beta", beta)?;
    let sigma = model.is_stochastic().then(|| model.diffusion());
    assemble_generator(basis, quad, weight, beta, reward, |s| Ok((model.drift(s)?, sigma.clone())))
}

/// One-step transition law of the discrete-time Bellman equation.
#[derive(Clone)]
pub enum TransitionLaw {
    /// `s' = e^{lambda dt} s`.
    LinearFlow { lambda: f64 },
    /// Gaussian OU transition, integrated with 64-node Gauss-Hermite.
    Ou { lambda: f64, sigma: f64 },
    /// Arbitrary deterministic step map.
    Map(Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for TransitionLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TransitionLaw::LinearFlow { lambda } => write!(f, "LinearFlow({lambda})"),
            TransitionLaw::Ou { lambda, sigma } => write!(f, "Ou({lambda}, {sigma})"),
            TransitionLaw::Map(_) => write!(f, "Map(..)"),
        }
    }
}

impl TransitionLaw {
    pub fn for_model(model: &DynamicsModel) -> Result<Self> {
        match *model {
            DynamicsModel::Linear1D { lambda } => Ok(TransitionLaw::LinearFlow { lambda }),
            DynamicsModel::Ou1D { lambda, sigma } => Ok(TransitionLaw::Ou { lambda, sigma }),
            _ => Err(Error::UnsupportedTransition(format!(
                "no closed-form one-step law for {}",
                model.id()
            ))),
        }
    }
}

/// Number of Gauss-Hermite nodes for Gaussian transition expectations.
pub const HERMITE_NODES: usize = 64;

/// `A[k][l] = <phi_l - gamma E[phi_l(s') | s], phi_k>`, `b[k] = <r dt, phi_k>`
/// with `gamma = e^{-beta dt}`.
#[allow(clippy::too_many_arguments)]
pub fn assemble_be_projection(
    basis: &Basis,
    law: &TransitionLaw,
    beta: f64,
    dt: f64,
    quad: &Quadrature,
    weight: &Weight,
    reward: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<LinearSystem> {
    check_positive("beta", beta)?;
    check_positive("dt", dt)?;
    check_domain(basis, quad)?;
    let gamma = (-beta * dt).exp();
    let p = basis.len();
    let rule = match law {
        TransitionLaw::Ou { .. } => Some(gauss_hermite(HERMITE_NODES)),
        _ => None,
    };
    if !matches!(law, TransitionLaw::Map(_)) && basis.dim() != 1 {
        return Err(Error::UnsupportedTransition("closed-form laws are one-dimensional".into()));
    }
    let mut next = vec![0.0; p];
    let mut expect = vec![0.0; p];
    assemble_blocks(basis, quad, weight, reward, dt, |s, phi, out| {
        basis.values_into(s, phi);
        expect.iter_mut().for_each(|v| *v = 0.0);
        match law {
            TransitionLaw::LinearFlow { lambda } => {
                basis.values_into(&[(lambda * dt).exp() * s[0]], &mut expect);
            }
            TransitionLaw::Map(f) => {
                let s1 = f(s);
                basis.values_into(&s1, &mut expect);
            }
            TransitionLaw::Ou { lambda, sigma } => {
                let (x, w) = rule.as_ref().expect("hermite rule");
                let (mean, var) = ou_transition_moments(*lambda, *sigma, s[0], dt);
                let scale = (2.0 * var).sqrt();
                let norm = 1.0 / std::f64::consts::PI.sqrt();
                for (xq, wq) in x.iter().zip(w) {
                    basis.values_into(&[mean + scale * xq], &mut next);
                    for (e, v) in expect.iter_mut().zip(&next) {
                        *e += wq * norm * v;
                    }
                }
            }
        }
        for l in 0..p {
            out[l] = phi[l] - gamma * expect[l];
        }
        Ok(())
    })
}

/// Shared block assembly: `A += (w phi) G^T`, `b += (w reward_scale r) phi`,
/// where `row` fills `G` (one row of `A`'s integrand per node).
fn assemble_blocks<F>(
    basis: &Basis,
    quad: &Quadrature,
    weight: &Weight,
    reward: &(dyn Fn(&[f64]) -> f64 + Sync),
    reward_scale: f64,
    mut row: F,
) -> Result<LinearSystem>
where
    F: FnMut(&[f64], &mut [f64], &mut [f64]) -> Result<()>,
{
    let p = basis.len();
    let n = quad.len();
    let cols = BLOCK.min(n.max(1));
    let mut left = DMatrix::<f64>::zeros(p, cols);
    let mut right = DMatrix::<f64>::zeros(p, cols);
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut b = DVector::<f64>::zeros(p);
    let mut phi = vec![0.0; p];
    let mut start = 0;
    while start < n {
        let len = cols.min(n - start);
        for c in 0..len {
            let idx = start + c;
            let s = quad.node(idx);
            let w = quad.weights()[idx] * weight.at(s);
            let gcol = &mut right.as_mut_slice()[c * p..(c + 1) * p];
            row(s, &mut phi, gcol)?;
            let r = reward(s);
            if !r.is_finite() || !w.is_finite() || gcol.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("galerkin integrand"));
            }
            let lcol = &mut left.as_mut_slice()[c * p..(c + 1) * p];
            for k in 0..p {
                lcol[k] = w * phi[k];
                b[k] += reward_scale * r * lcol[k];
            }
        }
        a.gemm(1.0, &left.columns(0, len), &right.columns(0, len).transpose(), 1.0);
        start += len;
    }
    LinearSystem::new(a, b)
}

fn check_domain(basis: &Basis, quad: &Quadrature) -> Result<()> {
    if basis.dim() != quad.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: quad.dim(),
        });
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// `V(s) = sum_{i=0}^{I} e^{-beta dt i} r(p^i(s)) dt` for a deterministic step map `p`.
pub struct BeRollout<R, P> {
    pub reward: R,
    pub step: P,
    pub beta: f64,
    pub dt: f64,
    pub horizon: usize,
}

impl<R, P> BeRollout<R, P>
where
    R: Fn(&[f64]) -> f64 + Sync,
    P: Fn(&[f64]) -> Vec<f64> + Sync,
{
    pub fn new(reward: R, step: P, beta: f64, dt: f64, horizon: Option<usize>) -> Result<Self> {
        check_positive("beta", beta)?;
        check_positive("dt", dt)?;
        let horizon = horizon.unwrap_or_else(|| default_horizon(dt));
        if horizon == 0 {
            return Err(Error::InvalidParameter("rollout horizon must be >= 1".into()));
        }
        Ok(BeRollout {
            reward,
            step,
            beta,
            dt,
            horizon,
        })
    }

    /// Bound on the omitted tail given `sup |r|`.
    pub fn tail_bound(&self, reward_sup: f64) -> f64 {
        let gamma = (-self.beta * self.dt).exp();
        gamma.powf(self.horizon as f64 + 1.0) * reward_sup * self.dt / (1.0 - gamma)
    }

    pub fn value(&self, s: &[f64]) -> f64 {
        let gamma = (-self.beta * self.dt).exp();
        let mut x = s.to_vec();
        let mut disc = 1.0;
        let mut acc = 0.0;
        for i in 0..=self.horizon {
            if i > 0 {
                x = (self.step)(&x);
            }
            acc += disc * (self.reward)(&x);
            disc *= gamma;
        }
        acc * self.dt
    }
}

impl<R, P> ValueFunction for BeRollout<R, P>
where
    R: Fn(&[f64]) -> f64 + Sync,
    P: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn value(&self, s: &[f64]) -> f64 {
        BeRollout::value(self, s)
    }
}

/// `ceil(500 / dt)`.
pub fn default_horizon(dt: f64) -> usize {
    (500.0 / dt).ceil() as usize
}

/// `V(s) = cos^3(k s)` and its first two derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cos3 {
    pub k: f64,
}

impl Cos3 {
    pub fn value(&self, s: f64) -> f64 {
        (self.k * s).cos().powi(3)
    }

    pub fn d1(&self, s: f64) -> f64 {
        let (sn, cs) = (self.k * s).sin_cos();
        -3.0 * self.k * cs * cs * sn
    }

    pub fn d2(&self, s: f64) -> f64 {
        let (sn, cs) = (self.k * s).sin_cos();
        let k2 = self.k * self.k;
        6.0 * k2 * cs * sn * sn - 3.0 * k2 * cs.powi(3)
    }
}

/// Reward `r = beta V - mu V' - 1/2 Sigma V''` making `V = cos^3(k s)` the exact
/// value function of a one-dimensional model.
pub fn designed_reward(model: &DynamicsModel, beta: f64, k: f64) -> Result<impl Fn(&[f64]) -> f64 + Send + Sync + Clone> {
    if model.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: model.dim(),
        });
    }
    let model = model.clone();
    let sig = model.diffusion()[0];
    let target = Cos3 { k };
    Ok(move |s: &[f64]| {
        let mu = model.drift(s).map(|v| v[0]).unwrap_or(f64::NAN);
        beta * target.value(s[0]) - mu * target.d1(s[0]) - 0.5 * sig * target.d2(s[0])
    })
}

/// Reward rate `q s^2 + r_ctrl u^2` under `u = -K s`, i.e. `R s^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LqParams {
    pub q: f64,
    pub r_ctrl: f64,
    pub gain: f64,
    pub alpha: f64,
    pub b_ctrl: f64,
    pub sigma: f64,
    pub beta: f64,
}

impl LqParams {
    pub fn reward_weight(&self) -> f64 {
        self.q + self.r_ctrl * self.gain * self.gain
    }

    /// Closed-loop rate `alpha - b K`.
    pub fn closed_loop(&self) -> f64 {
        self.alpha - self.b_ctrl * self.gain
    }

    pub fn model(&self) -> DynamicsModel {
        DynamicsModel::Ou1D {
            lambda: self.closed_loop(),
            sigma: self.sigma,
        }
    }
}

/// `V(s) = a1 s^2 + a2`.
pub fn lq_true_value(p: &LqParams) -> Result<(f64, f64)> {
    let lambda = p.closed_loop();
    let denom = p.beta - 2.0 * lambda;
    if !(denom > 0.0) || !(p.beta > 0.0) {
        return Err(Error::DivergentValue(format!(
            "beta = {} must exceed 2 lambda = {}",
            p.beta,
            2.0 * lambda
        )));
    }
    let a1 = p.reward_weight() / denom;
    Ok((a1, p.sigma * p.sigma * a1 / p.beta))
}

/// Per-unit-time variance of one exact step, `sigma^2 (e^{2 lambda dt} - 1) / (2 lambda dt)`.
pub fn step_variance_rate(lambda: f64, sigma: f64, dt: f64) -> f64 {
    let x = 2.0 * lambda * dt;
    if x.abs() < 1e-12 {
        sigma * sigma
    } else {
        sigma * sigma * x.exp_m1() / x
    }
}

/// Quadratic solution `(a1R, a0R)` of the discrete-time Bellman equation.
pub fn lq_be_value(reward_weight: f64, lambda: f64, sigma: f64, beta: f64, dt: f64) -> Result<(f64, f64)> {
    check_positive("beta", beta)?;
    check_positive("dt", dt)?;
    let gamma = (-beta * dt).exp();
    let ratio = gamma * (2.0 * lambda * dt).exp();
    if !(ratio < 1.0) {
        return Err(Error::DivergentValue(format!(
            "geometric ratio {ratio} >= 1"
        )));
    }
    let a1 = reward_weight * dt / (1.0 - ratio);
    let a0 = gamma * dt * step_variance_rate(lambda, sigma, dt) * a1 / (1.0 - gamma);
    Ok((a1, a0))
}

/// Surrogate drift rate `(e^{lambda dt} - 1)/dt` and curvature `(e^{lambda dt} - 1)^2/dt`.
pub fn lq_surrogate_rates(lambda: f64, dt: f64) -> (f64, f64) {
    let em1 = (lambda * dt).exp_m1();
    (em1 / dt, em1 * em1 / dt)
}

/// Quadratic solution `(a1P, a0P)` of the first-order surrogate equation.
pub fn lq_phibe_value(reward_weight: f64, lambda: f64, sigma: f64, beta: f64, dt: f64) -> Result<(f64, f64)> {
    check_positive("beta", beta)?;
    check_positive("dt", dt)?;
    let (lam_hat, eta) = lq_surrogate_rates(lambda, dt);
    let denom = beta - 2.0 * lam_hat - eta;
    if !(denom > 0.0) {
        return Err(Error::DivergentValue(format!("nonpositive denominator {denom}")));
    }
    let a1 = reward_weight / denom;
    Ok((a1, step_variance_rate(lambda, sigma, dt) * a1 / beta))
}

/// Coefficients of `beta V - R s^2 - lam_hat s V' - 1/2 (var + lam_hat^2 s^2 dt) V''`
/// for `V = a1 s^2 + a0`, as `(s^2 coefficient, constant)`.
pub fn lq_phibe_residual(reward_weight: f64, lambda: f64, sigma: f64, beta: f64, dt: f64, a1: f64, a0: f64) -> (f64, f64) {
    let (lam_hat, _) = lq_surrogate_rates(lambda, dt);
    let var = step_variance_rate(lambda, sigma, dt);
    let quad = beta * a1 - reward_weight - 2.0 * lam_hat * a1 - lam_hat * lam_hat * dt * a1;
    let cons = beta * a0 - var * a1;
    (quad, cons)
}

/// `V(s) = s^T P s + c` for `ds = A s dt + dW_Sigma` with reward `s^T Q s`:
/// `A^T P + P A - beta P = -Q`, `c = tr(Sigma P)/beta`.
pub fn lq_true_value_nd(
    a: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    q: &DMatrix<f64>,
    beta: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let d = a.nrows();
    for m in [a, sigma, q] {
        if m.nrows() != d || m.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: m.nrows(),
            });
        }
    }
    check_positive("beta", beta)?;
    let max_re = a
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(beta > 2.0 * max_re) {
        return Err(Error::DivergentValue(format!(
            "beta = {beta} must exceed twice the spectral abscissa {max_re}"
        )));
    }
    let id = DMatrix::<f64>::identity(d, d);
    let at = a.transpose();
    let op = id.kronecker(&at) + at.kronecker(&id) - DMatrix::identity(d * d, d * d) * beta;
    let rhs = DVector::from_iterator(d * d, q.iter().map(|v| -v));
    let vec_p = op
        .col_piv_qr()
        .solve(&rhs)
        .ok_or(Error::IllConditioned {
            condition: f64::INFINITY,
            count: 0,
        })?;
    let p = DMatrix::from_column_slice(d, d, vec_p.as_slice());
    let p = (&p + p.transpose()) * 0.5;
    let c = (sigma * &p).trace() / beta;
    Ok((p, c))
}
