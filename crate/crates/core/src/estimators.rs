//! Drift and diffusion surrogates from multi-step transitions.
//!
//! Model-based: `mu_hat_i(s) = (1/dt) sum_j a_j E[s_{j dt} - s_0 | s_0 = s]` and
//! `Sigma_hat_i(s) = (1/dt) sum_j a_j E[(s_{j dt} - s_0)(s_{j dt} - s_0)^T | s_0 = s]`.
//! Data-driven: the same sums with the expectation replaced by one observed window.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dynamics::{stream_rng, DynamicsModel, GaussianLinearLaw};
use crate::error::{Error, Result};
use crate::fdcoeff::FdCoefficients;
use crate::metrics::{fit_order, OrderFit};

#[derive(Debug, Clone, PartialEq)]
pub struct LocalDynamicsEstimate {
    /// Drift surrogate, state/time.
    pub mu: Vec<f64>,
    /// Diffusion surrogate, row-major `d x d`, state^2/time.
    pub sigma: Vec<f64>,
    pub anchor: Vec<f64>,
}

/// Conditional displacement moments `E[s_t - s_0 | s_0 = s]` and
/// `E[(s_t - s_0)(s_t - s_0)^T | s_0 = s]`.
pub trait TransitionMomentProvider: Sync {
    fn dim(&self) -> usize;

    /// Returns `(first moment, second moment row-major)` at lag `t`.
    fn displacement_moments(&self, s: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Closed-form OU moments.
#[derive(Debug, Clone, Copy)]
pub struct OuMoments {
    pub lambda: f64,
    pub sigma: f64,
}

impl TransitionMomentProvider for OuMoments {
    fn dim(&self) -> usize {
        1
    }

    fn displacement_moments(&self, s: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (mean, var) = crate::dynamics::ou_transition_moments(self.lambda, self.sigma, s[0], t);
        let shift = mean - s[0];
        Ok((vec![shift], vec![var + shift * shift]))
    }
}

/// Deterministic linear flow `s_t = e^{lambda t} s`.
#[derive(Debug, Clone, Copy)]
pub struct LinearFlowMoments {
    pub lambda: f64,
}

impl TransitionMomentProvider for LinearFlowMoments {
    fn dim(&self) -> usize {
        1
    }

    fn displacement_moments(&self, s: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let shift = (self.lambda * t).exp_m1() * s[0];
        Ok((vec![shift], vec![shift * shift]))
    }
}

/// Gaussian moments of `ds = A s dt + dW_Sigma` for the lags `j dt`, `j = 1..=order`.
#[derive(Debug, Clone)]
pub struct LinearNdMoments {
    laws: Vec<(f64, GaussianLinearLaw)>,
}

impl LinearNdMoments {
    pub fn new(a: &DMatrix<f64>, sigma_diag: &DVector<f64>, dt: f64, order: usize) -> Result<Self> {
        let laws = (1..=order)
            .map(|j| {
                let t = j as f64 * dt;
                GaussianLinearLaw::new(a, sigma_diag, t).map(|law| (t, law))
            })
            .collect::<Result<_>>()?;
        Ok(LinearNdMoments { laws })
    }
}

impl TransitionMomentProvider for LinearNdMoments {
    fn dim(&self) -> usize {
        self.laws.first().map_or(0, |(_, l)| l.flow.nrows())
    }

    fn displacement_moments(&self, s: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let (_, law) = self
            .laws
            .iter()
            .find(|(lag, _)| (lag - t).abs() <= 1e-12 * t.abs().max(1.0))
            .ok_or_else(|| Error::UnsupportedTransition(format!("lag {t} not precomputed")))?;
        let d = s.len();
        let mean = law.mean(s);
        let shift: Vec<f64> = mean.iter().zip(s).map(|(m, x)| m - x).collect();
        let mut second = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                second[i * d + j] = law.covariance[(i, j)] + shift[i] * shift[j];
            }
        }
        Ok((shift, second))
    }
}

/// Monte Carlo moments for models without a closed form: `samples` Euler-Maruyama
/// paths of step `t / substeps_per_lag`, seeded from `(seed, state hash)`.
/// A model without noise uses a single path.
#[derive(Debug, Clone)]
pub struct MonteCarloMoments {
    pub model: DynamicsModel,
    pub samples: usize,
    pub internal_step: f64,
    pub seed: u64,
}

impl TransitionMomentProvider for MonteCarloMoments {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn displacement_moments(&self, s: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let d = s.len();
        let substeps = ((t / self.internal_step).round() as usize).max(1);
        let paths = if self.model.is_stochastic() { self.samples.max(1) } else { 1 };
        let key = s.iter().fold(0u64, |h, v| h.rotate_left(17) ^ v.to_bits());
        let mut rng = stream_rng(self.seed ^ key, t.to_bits());
        let mut first = vec![0.0; d];
        let mut second = vec![0.0; d * d];
        for _ in 0..paths {
            let end = self.model.euler_maruyama(s, t, substeps, &mut rng)?;
            if end.iter().any(|v| !v.is_finite()) {
                return Err(Error::SimulationDiverged { step: substeps });
            }
            let dx: Vec<f64> = end.iter().zip(s).map(|(e, x)| e - x).collect();
            for i in 0..d {
                first[i] += dx[i];
                for j in 0..d {
                    second[i * d + j] += dx[i] * dx[j];
                }
            }
        }
        let inv = 1.0 / paths as f64;
        first.iter_mut().for_each(|v| *v *= inv);
        second.iter_mut().for_each(|v| *v *= inv);
        Ok((first, second))
    }
}

/// Deterministic flow given as a map `(s, t) -> s_t`.
pub struct FlowMoments<F> {
    pub dim: usize,
    pub flow: F,
}

impl<F> TransitionMomentProvider for FlowMoments<F>
where
    F: Fn(&[f64], f64) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn displacement_moments(&self, s: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let end = (self.flow)(s, t);
        let d = s.len();
        let dx: Vec<f64> = end.iter().zip(s).map(|(e, x)| e - x).collect();
        let mut second = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                second[i * d + j] = dx[i] * dx[j];
            }
        }
        Ok((dx, second))
    }
}

fn check_window(window: &[&[f64]], coeffs: &FdCoefficients, dt: f64) -> Result<usize> {
    if window.len() != coeffs.order() + 1 {
        return Err(Error::WindowLength {
            order: coeffs.order(),
            got: window.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let d = window[0].len();
    if let Some(bad) = window.iter().find(|w| w.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: bad.len(),
        });
    }
    Ok(d)
}

/// `(1/dt) sum_{k=1..i} a_k (window[k] - window[0])`.
pub fn mu_bar(window: &[&[f64]], dt: f64, coeffs: &FdCoefficients) -> Result<Vec<f64>> {
    let d = check_window(window, coeffs, dt)?;
    let mut mu = vec![0.0; d];
    mu_bar_into(window, dt, coeffs, &mut mu);
    Ok(mu)
}

/// `(1/dt) sum_{k=1..i} a_k (window[k] - window[0])(window[k] - window[0])^T`.
pub fn sigma_bar(window: &[&[f64]], dt: f64, coeffs: &FdCoefficients) -> Result<Vec<f64>> {
    let d = check_window(window, coeffs, dt)?;
    let mut sig = vec![0.0; d * d];
    sigma_bar_into(window, dt, coeffs, &mut sig);
    Ok(sig)
}

pub fn local_estimate(window: &[&[f64]], dt: f64, coeffs: &FdCoefficients) -> Result<LocalDynamicsEstimate> {
    let d = check_window(window, coeffs, dt)?;
    let mut mu = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    mu_bar_into(window, dt, coeffs, &mut mu);
    sigma_bar_into(window, dt, coeffs, &mut sigma);
    Ok(LocalDynamicsEstimate {
        mu,
        sigma,
        anchor: window[0].to_vec(),
    })
}

pub(crate) fn mu_bar_into(window: &[&[f64]], dt: f64, coeffs: &FdCoefficients, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let base = window[0];
    for (k, a) in coeffs.step_weights().iter().enumerate() {
        let sk = window[k + 1];
        for i in 0..out.len() {
            out[i] += a * (sk[i] - base[i]);
        }
    }
    out.iter_mut().for_each(|v| *v /= dt);
}

/// Fills the upper triangle and mirrors it, so the result is exactly symmetric.
pub(crate) fn sigma_bar_into(window: &[&[f64]], dt: f64, coeffs: &FdCoefficients, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let d = window[0].len();
    let base = window[0];
    for (k, a) in coeffs.step_weights().iter().enumerate() {
        let sk = window[k + 1];
        for i in 0..d {
            let di = sk[i] - base[i];
            for j in i..d {
                out[i * d + j] += a * di * (sk[j] - base[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = out[i * d + j] / dt;
            out[i * d + j] = v;
            out[j * d + i] = v;
        }
    }
}

/// `mu_hat_i(s)` and `Sigma_hat_i(s)` from exact displacement moments.
pub fn model_mu_sigma_hat<P: TransitionMomentProvider + ?Sized>(
    provider: &P,
    s: &[f64],
    dt: f64,
    coeffs: &FdCoefficients,
) -> Result<LocalDynamicsEstimate> {
    if s.len() != provider.dim() {
        return Err(Error::DimensionMismatch {
            expected: provider.dim(),
            got: s.len(),
        });
    }
    let d = s.len();
    let mut mu = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    for (k, a) in coeffs.step_weights().iter().enumerate() {
        let (m1, m2) = provider.displacement_moments(s, (k + 1) as f64 * dt)?;
        for i in 0..d {
            mu[i] += a * m1[i];
        }
        for ij in 0..d * d {
            sigma[ij] += a * m2[ij];
        }
    }
    for i in 0..d {
        mu[i] /= dt;
        for j in i..d {
            let v = 0.5 * (sigma[i * d + j] + sigma[j * d + i]) / dt;
            sigma[i * d + j] = v;
            sigma[j * d + i] = v;
        }
    }
    if mu.iter().chain(&sigma).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("drift/diffusion surrogate"));
    }
    Ok(LocalDynamicsEstimate {
        mu,
        sigma,
        anchor: s.to_vec(),
    })
}

/// `A_hat_i = (1/dt) sum_j a_j (e^{A j dt} - I)`, the drift matrix seen through
/// the order-`i` surrogate on an exact linear flow.
pub fn linear_drift_surrogate(a: &DMatrix<f64>, dt: f64, coeffs: &FdCoefficients) -> DMatrix<f64> {
    let d = a.nrows();
    let mut out = DMatrix::zeros(d, d);
    for (k, w) in coeffs.step_weights().iter().enumerate() {
        let flow = (a * ((k + 1) as f64 * dt)).exp();
        out += (flow - DMatrix::identity(d, d)) * *w;
    }
    out / dt
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrderCheck {
    pub dts: Vec<f64>,
    /// `||A_hat_i - A||_2` at each `dt`.
    pub errors: Vec<f64>,
    /// `None` when every error is exactly zero.
    pub fit: Option<OrderFit>,
}

/// Log-log slope of `||A_hat_i - A||` against `dt`.
pub fn estimator_order_check(a: &DMatrix<f64>, coeffs: &FdCoefficients, dt_grid: &[f64]) -> Result<OrderCheck> {
    if dt_grid.len() < 3 {
        return Err(Error::DegenerateFit(format!(
            "need at least 3 grid points, got {}",
            dt_grid.len()
        )));
    }
    let errors: Vec<f64> = dt_grid
        .iter()
        .map(|&dt| (linear_drift_surrogate(a, dt, coeffs) - a).norm())
        .collect();
    let fit = if errors.iter().all(|e| *e == 0.0) {
        None
    } else {
        Some(fit_order(dt_grid, &errors)?)
    };
    Ok(OrderCheck {
        dts: dt_grid.to_vec(),
        errors,
        fit,
    })
}

/// Monte Carlo mean and standard error of `mu_bar` and `sigma_bar` (1D) over
/// `n` independent windows started at `s`.
pub fn window_statistics<R: Rng>(
    model: &DynamicsModel,
    s: f64,
    dt: f64,
    coeffs: &FdCoefficients,
    n: usize,
    rng: &mut R,
) -> Result<[(f64, f64); 2]> {
    let mut acc = [(0.0, 0.0); 2];
    let mut states = vec![0.0; coeffs.order() + 1];
    for _ in 0..n {
        states[0] = s;
        for k in 1..states.len() {
            states[k] = model.exact_step(&[states[k - 1]], dt, rng)?[0];
        }
        let window: Vec<&[f64]> = states.iter().map(std::slice::from_ref).collect();
        let m = mu_bar(&window, dt, coeffs)?[0];
        let v = sigma_bar(&window, dt, coeffs)?[0];
        for (slot, x) in acc.iter_mut().zip([m, v]) {
            slot.0 += x;
            slot.1 += x * x;
        }
    }
    let nf = n as f64;
    Ok(acc.map(|(sum, sq)| {
        let mean = sum / nf;
        let var = (sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
        (mean, (var / nf).sqrt())
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcoeff::fd_coefficients;
    use rand::SeedableRng;

    fn w<'a>(xs: &'a [f64]) -> Vec<&'a [f64]> {
        xs.iter().map(std::slice::from_ref).collect()
    }

    #[test]
    fn mu_bar_examples() {
        let c1 = fd_coefficients(1).unwrap();
        let c2 = fd_coefficients(2).unwrap();
        assert_eq!(mu_bar(&w(&[0.0, 0.5]), 0.5, &c1).unwrap(), vec![1.0]);
        let m = mu_bar(&w(&[0.0, 0.5, 1.2]), 0.5, &c2).unwrap()[0];
        assert!((m - 0.8).abs() < 1e-15);
        let traj = [1.0, 0.25f64.exp()];
        let m = mu_bar(&w(&traj), 5.0, &c1).unwrap()[0];
        assert!((m - 0.0568051).abs() < 1e-7);
        assert_eq!(
            mu_bar(&w(&[0.0, 1.0, 2.0]), 1.0, &c1),
            Err(Error::WindowLength { order: 1, got: 3 })
        );
    }

    #[test]
    fn sigma_bar_examples() {
        let c1 = fd_coefficients(1).unwrap();
        let c2 = fd_coefficients(2).unwrap();
        assert_eq!(sigma_bar(&w(&[0.0, 0.5]), 0.5, &c1).unwrap(), vec![0.5]);
        assert_eq!(sigma_bar(&w(&[3.0, 3.0, 3.0]), 0.1, &c2).unwrap(), vec![0.0]);
        assert_eq!(sigma_bar(&w(&[0.0, 1.0, 2.0]), 1.0, &c2).unwrap(), vec![0.0]);
    }

    #[test]
    fn sigma_bar_is_exactly_symmetric() {
        let c2 = fd_coefficients(2).unwrap();
        let a = [0.1, -0.3, 0.7];
        let b = [0.4, 0.2, 0.1];
        let c = [-0.2, 0.9, 0.35];
        let s = sigma_bar(&[&a, &b, &c], 0.3, &c2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s[i * 3 + j].to_bits(), s[j * 3 + i].to_bits());
            }
        }
    }

    #[test]
    fn ou_model_surrogates() {
        let c1 = fd_coefficients(1).unwrap();
        let p = OuMoments { lambda: 0.05, sigma: 1.0 };
        let est = model_mu_sigma_hat(&p, &[1.0], 1.0, &c1).unwrap();
        assert!((est.mu[0] - 0.0512711).abs() < 1e-7);
        let want = 1.0517092 + 0.05127109637602412f64.powi(2);
        assert!((est.sigma[0] - want).abs() < 1e-7);
        assert!((est.sigma[0] - 1.0543).abs() < 1e-4);
    }

    #[test]
    fn deterministic_provider_has_drift_squared_diffusion() {
        let lambda = 0.05;
        let dt = 0.7;
        let s = 1.3;
        for order in 1..=3 {
            let c = fd_coefficients(order).unwrap();
            let est = model_mu_sigma_hat(&LinearFlowMoments { lambda }, &[s], dt, &c).unwrap();
            let want: f64 = c
                .step_weights()
                .iter()
                .enumerate()
                .map(|(k, a)| a * (lambda * (k + 1) as f64 * dt).exp_m1().powi(2) * s * s / dt)
                .sum();
            assert!((est.sigma[0] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn first_order_drift_converges_linearly() {
        let c1 = fd_coefficients(1).unwrap();
        let lambda = 0.3;
        for s in [-2.0, -0.5, 0.4, 1.7] {
            let errs: Vec<f64> = [1e-2, 1e-3]
                .iter()
                .map(|&dt| {
                    let est = model_mu_sigma_hat(&LinearFlowMoments { lambda }, &[s], dt, &c1).unwrap();
                    (est.mu[0] - lambda * s).abs()
                })
                .collect();
            // Leading term lambda^2 s dt / 2.
            for (e, dt) in errs.iter().zip([1e-2, 1e-3]) {
                assert!(*e <= lambda * lambda * s.abs() * dt);
            }
            assert!((errs[0] / errs[1] - 10.0).abs() < 0.1);
        }
    }

    #[test]
    fn estimator_order_slopes() {
        let a = DMatrix::from_element(1, 1, 0.05);
        let grid = [5.0, 2.5, 1.25, 0.625];
        for (order, tol) in [(1usize, 0.15), (2, 0.2)] {
            let c = fd_coefficients(order).unwrap();
            let check = estimator_order_check(&a, &c, &grid).unwrap();
            // Oracle: direct evaluation of the scalar surrogate.
            for (dt, e) in grid.iter().zip(&check.errors) {
                let direct: f64 = c
                    .step_weights()
                    .iter()
                    .enumerate()
                    .map(|(k, w)| w * (0.05 * (k + 1) as f64 * dt).exp_m1())
                    .sum::<f64>()
                    / dt;
                assert!(((direct - 0.05).abs() - e).abs() < 1e-12);
            }
            let slope = check.fit.unwrap().slope;
            assert!((slope - order as f64).abs() < tol, "order {order}: {slope}");
        }
        let zero = DMatrix::zeros(1, 1);
        let check = estimator_order_check(&zero, &fd_coefficients(2).unwrap(), &grid).unwrap();
        assert!(check.errors.iter().all(|e| *e == 0.0));
        assert!(check.fit.is_none());
        assert!(matches!(
            estimator_order_check(&a, &fd_coefficients(1).unwrap(), &[1.0, 0.5]),
            Err(Error::DegenerateFit(_))
        ));
    }

    #[test]
    fn window_means_are_unbiased_for_ou() {
        let model = DynamicsModel::Ou1D { lambda: 0.05, sigma: 1.0 };
        let c1 = fd_coefficients(1).unwrap();
        let s = 0.8;
        let dt = 0.5;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let [(m_mean, m_se), (v_mean, v_se)] = window_statistics(&model, s, dt, &c1, 100_000, &mut rng).unwrap();
        let exact = model_mu_sigma_hat(&OuMoments { lambda: 0.05, sigma: 1.0 }, &[s], dt, &c1).unwrap();
        assert!((m_mean - exact.mu[0]).abs() < 4.0 * m_se, "{m_mean} vs {}", exact.mu[0]);
        assert!((v_mean - exact.sigma[0]).abs() < 4.0 * v_se, "{v_mean} vs {}", exact.sigma[0]);
    }

    #[test]
    fn linear_nd_matches_ou_moments() {
        let a = DMatrix::from_element(1, 1, -0.3);
        let sig = DVector::from_element(1, 0.49);
        let nd = LinearNdMoments::new(&a, &sig, 0.4, 2).unwrap();
        let ou = OuMoments { lambda: -0.3, sigma: 0.7 };
        let c2 = fd_coefficients(2).unwrap();
        let e1 = model_mu_sigma_hat(&nd, &[0.9], 0.4, &c2).unwrap();
        let e2 = model_mu_sigma_hat(&ou, &[0.9], 0.4, &c2).unwrap();
        assert!((e1.mu[0] - e2.mu[0]).abs() < 1e-12);
        assert!((e1.sigma[0] - e2.sigma[0]).abs() < 1e-12);
    }
}
