//! Parametric dynamics, trajectory simulation, and exact transition laws.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairs are generated in fixed-size chunks, each with its own derived stream,
/// so output does not depend on the number of worker threads.
const PAIR_CHUNK: usize = 4096;

/// RNG stream `index` of the master seed. ChaCha streams are independent
/// counters under the same key, which makes this a counter-based split.
pub fn stream_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DynamicsModel {
    /// `ds = lambda s dt`
    #[serde(rename = "linear1d")]
    Linear1D { lambda: f64 },
    /// `ds = lambda sin^2(s) dt`
    #[serde(rename = "nonlinear_sin1d")]
    NonlinearSin1D { lambda: f64 },
    /// `ds = lambda s dt + sigma dW`
    #[serde(rename = "ou1d")]
    Ou1D { lambda: f64, sigma: f64 },
    /// `ds = (-kappa s^3 + (alpha - b K) s) dt + sigma dW`, the closed loop under `u = K s`.
    #[serde(rename = "cubic1d")]
    CubicStabilization1D {
        kappa: f64,
        alpha: f64,
        b: f64,
        gain: f64,
        sigma: f64,
    },
    /// `ds = A s dt + dW_Sigma` with diagonal diffusion `Sigma = diag(sigma_diag)`
    /// (the covariance rate `sigma sigma^T`, not its square root).
    #[serde(rename = "linear_nd")]
    LinearNd {
        a: DMatrix<f64>,
        sigma_diag: DVector<f64>,
    },
}

impl DynamicsModel {
    pub fn linear_nd(a: DMatrix<f64>, sigma_diag: DVector<f64>) -> Result<Self> {
        if !a.is_square() || a.nrows() != sigma_diag.len() || a.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: sigma_diag.len(),
            });
        }
        if sigma_diag.iter().any(|v| *v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "diffusion entries must be finite and nonnegative".into(),
            ));
        }
        Ok(DynamicsModel::LinearNd { a, sigma_diag })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name: &str| Err(Error::InvalidParameter(format!("{name} must be finite and >= 0")));
        match self {
            DynamicsModel::Ou1D { sigma, lambda } if !lambda.is_finite() || !(*sigma >= 0.0) => bad("sigma"),
            DynamicsModel::CubicStabilization1D { sigma, .. } if !(*sigma >= 0.0) => bad("sigma"),
            DynamicsModel::LinearNd { a, sigma_diag } => {
                Self::linear_nd(a.clone(), sigma_diag.clone()).map(|_| ())
            }
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DynamicsModel::LinearNd { a, .. } => a.nrows(),
            _ => 1,
        }
    }

    pub fn id(&self) -> String {
        match self {
            DynamicsModel::Linear1D { lambda } => format!("linear1d(lambda={lambda})"),
            DynamicsModel::NonlinearSin1D { lambda } => format!("nonlinear_sin1d(lambda={lambda})"),
            DynamicsModel::Ou1D { lambda, sigma } => format!("ou1d(lambda={lambda},sigma={sigma})"),
            DynamicsModel::CubicStabilization1D {
                kappa,
                alpha,
                b,
                gain,
                sigma,
            } => format!("cubic1d(kappa={kappa},alpha={alpha},b={b},K={gain},sigma={sigma})"),
            DynamicsModel::LinearNd { a, .. } => format!("linear_nd(d={})", a.nrows()),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        match self {
            DynamicsModel::Linear1D { .. } | DynamicsModel::NonlinearSin1D { .. } => false,
            DynamicsModel::Ou1D { sigma, .. } => *sigma > 0.0,
            DynamicsModel::CubicStabilization1D { sigma, .. } => *sigma > 0.0,
            DynamicsModel::LinearNd { sigma_diag, .. } => sigma_diag.iter().any(|v| *v > 0.0),
        }
    }

    /// Whether [`DynamicsModel::exact_step`] is available.
    pub fn has_exact_transition(&self) -> bool {
        matches!(
            self,
            DynamicsModel::Linear1D { .. } | DynamicsModel::Ou1D { .. } | DynamicsModel::LinearNd { .. }
        )
    }

    fn check_dim(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: s.len(),
            });
        }
        Ok(())
    }

    pub fn drift(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(s)?;
        let mut out = vec![0.0; self.dim()];
        self.drift_into(s, &mut out);
        Ok(out)
    }

    fn drift_into(&self, s: &[f64], out: &mut [f64]) {
        match self {
            DynamicsModel::Linear1D { lambda } | DynamicsModel::Ou1D { lambda, .. } => {
                out[0] = lambda * s[0]
            }
            DynamicsModel::NonlinearSin1D { lambda } => out[0] = lambda * s[0].sin().powi(2),
            DynamicsModel::CubicStabilization1D {
                kappa,
                alpha,
                b,
                gain,
                ..
            } => out[0] = -kappa * s[0].powi(3) + (alpha - b * gain) * s[0],
            DynamicsModel::LinearNd { a, .. } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..s.len()).map(|j| a[(i, j)] * s[j]).sum();
                }
            }
        }
    }

    /// Diffusion covariance rate `Sigma = sigma sigma^T` as a row-major `d x d` matrix.
    pub fn diffusion(&self) -> Vec<f64> {
        match self {
            DynamicsModel::Linear1D { .. } | DynamicsModel::NonlinearSin1D { .. } => vec![0.0],
            DynamicsModel::Ou1D { sigma, .. } | DynamicsModel::CubicStabilization1D { sigma, .. } => {
                vec![sigma * sigma]
            }
            DynamicsModel::LinearNd { sigma_diag, .. } => {
                let d = sigma_diag.len();
                let mut m = vec![0.0; d * d];
                for i in 0..d {
                    m[i * d + i] = sigma_diag[i];
                }
                m
            }
        }
    }

    /// Per-coordinate noise scale `sqrt(Sigma_ii)`; diffusion is diagonal for every kind.
    fn noise_scale(&self) -> Vec<f64> {
        match self {
            DynamicsModel::LinearNd { sigma_diag, .. } => sigma_diag.iter().map(|v| v.sqrt()).collect(),
            DynamicsModel::Ou1D { sigma, .. } | DynamicsModel::CubicStabilization1D { sigma, .. } => {
                vec![sigma.abs()]
            }
            _ => vec![0.0],
        }
    }

    /// One Euler(-Maruyama) step of size `delta` in place.
    fn euler_step<R: Rng + ?Sized>(&self, s: &mut [f64], delta: f64, scale: &[f64], rng: &mut R, buf: &mut [f64]) {
        self.drift_into(s, buf);
        let sq = delta.sqrt();
        for i in 0..s.len() {
            s[i] += buf[i] * delta;
            if scale[i] > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                s[i] += scale[i] * sq * z;
            }
        }
    }

    /// Advances `s` by `dt` using `substeps` Euler-Maruyama steps.
    pub fn euler_maruyama<R: Rng + ?Sized>(&self, s: &[f64], dt: f64, substeps: usize, rng: &mut R) -> Result<Vec<f64>> {
        self.check_dim(s)?;
        let mut x = s.to_vec();
        let mut buf = vec![0.0; x.len()];
        let scale = self.noise_scale();
        let delta = dt / substeps as f64;
        for _ in 0..substeps {
            self.euler_step(&mut x, delta, &scale, rng, &mut buf);
        }
        Ok(x)
    }

    /// Samples `s_dt` given `s_0 = s` from the exact transition law.
    pub fn exact_step<R: Rng + ?Sized>(&self, s: &[f64], dt: f64, rng: &mut R) -> Result<Vec<f64>> {
        self.check_dim(s)?;
        match self {
            DynamicsModel::Linear1D { lambda } => Ok(vec![exact_linear_step_scalar(*lambda, s[0], dt)]),
            DynamicsModel::Ou1D { lambda, sigma } => {
                let (mean, var) = ou_transition_moments(*lambda, *sigma, s[0], dt);
                let z: f64 = rng.sample(StandardNormal);
                Ok(vec![mean + var.sqrt() * z])
            }
            DynamicsModel::LinearNd { a, sigma_diag } => {
                let law = GaussianLinearLaw::new(a, sigma_diag, dt)?;
                Ok(law.sample(s, rng))
            }
            _ => Err(Error::UnsupportedTransition(format!(
                "no closed-form transition for {}",
                self.id()
            ))),
        }
    }
}

/// Exact one-step law of `ds = A s dt + dW_Sigma`: `N(e^{A dt} s, Q(dt))`.
#[derive(Debug, Clone)]
pub struct GaussianLinearLaw {
    pub flow: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl GaussianLinearLaw {
    /// Covariance `Q = int_0^dt e^{Au} Sigma e^{A^T u} du` via Van Loan's block exponential.
    pub fn new(a: &DMatrix<f64>, sigma_diag: &DVector<f64>, dt: f64) -> Result<Self> {
        let d = a.nrows();
        let mut block = DMatrix::zeros(2 * d, 2 * d);
        block.view_mut((0, 0), (d, d)).copy_from(&(-a * dt));
        block
            .view_mut((0, d), (d, d))
            .copy_from(&(DMatrix::from_diagonal(sigma_diag) * dt));
        block.view_mut((d, d), (d, d)).copy_from(&(a.transpose() * dt));
        let e = block.exp();
        let flow = e.view((d, d), (d, d)).transpose();
        let g12 = e.view((0, d), (d, d)).into_owned();
        let mut covariance = &flow * g12;
        covariance = (&covariance + covariance.transpose()) * 0.5;
        if covariance.iter().any(|v| !v.is_finite()) || flow.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear transition law"));
        }
        let chol = lower_cholesky_psd(&covariance);
        Ok(GaussianLinearLaw {
            flow,
            covariance,
            chol,
        })
    }

    pub fn mean(&self, s: &[f64]) -> Vec<f64> {
        let d = s.len();
        (0..d)
            .map(|i| (0..d).map(|j| self.flow[(i, j)] * s[j]).sum())
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> Vec<f64> {
        let d = s.len();
        let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut out = self.mean(s);
        for i in 0..d {
            for j in 0..=i {
                out[i] += self.chol[(i, j)] * z[j];
            }
        }
        out
    }
}

/// Cholesky factor that tolerates exactly-singular (zero-noise) directions.
fn lower_cholesky_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let mut l = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        let ljj = if diag > 0.0 { diag.sqrt() } else { 0.0 };
        l[(j, j)] = ljj;
        for i in j + 1..d {
            let mut v = m[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = if ljj > 0.0 { v / ljj } else { 0.0 };
        }
    }
    l
}

pub fn exact_linear_step_scalar(lambda: f64, s: f64, dt: f64) -> f64 {
    (lambda * dt).exp() * s
}

/// `e^{A dt} s` using a scaling-and-squaring matrix exponential.
pub fn exact_linear_step(a: &DMatrix<f64>, s: &[f64], dt: f64) -> Result<Vec<f64>> {
    if a.nrows() != s.len() || !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: s.len(),
        });
    }
    let flow = (a * dt).exp();
    Ok((0..s.len())
        .map(|i| (0..s.len()).map(|j| flow[(i, j)] * s[j]).sum())
        .collect())
}

/// Exact flow of `ds = lambda sin^2(s) dt`: `cot s_t = cot s_0 - lambda t` on the
/// invariant interval `(k pi, (k+1) pi)` containing `s_0`; multiples of `pi` are fixed.
pub fn sin2_flow(lambda: f64, s: f64, t: f64) -> f64 {
    let k = (s / PI).floor();
    let base = k * PI;
    let x = s - base;
    if x == 0.0 {
        return s;
    }
    let c = x.cos() / x.sin() - lambda * t;
    base + (FRAC_PI_2 - c.atan())
}

/// Mean and variance of `s_t` given `s_0 = s` for `ds = lambda s dt + sigma dW`.
pub fn ou_transition_moments(lambda: f64, sigma: f64, s: f64, t: f64) -> (f64, f64) {
    let mean = s * (lambda * t).exp();
    let var = if (lambda * t).abs() < 1e-8 {
        sigma * sigma * t
    } else {
        sigma * sigma * (2.0 * lambda * t).exp_m1() / (2.0 * lambda)
    };
    (mean, var)
}

/// States of one rollout sampled every `dt`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    states: Vec<f64>,
    dim: usize,
    pub dt: f64,
    pub seed: u64,
    pub model_id: String,
}

impl Trajectory {
    pub fn new(states: Vec<f64>, dim: usize, dt: f64, seed: u64, model_id: impl Into<String>) -> Result<Self> {
        if dim == 0 || states.is_empty() || states.len() % dim != 0 {
            return Err(Error::InvalidParameter(format!(
                "trajectory needs a nonempty multiple of dim={dim} values, got {}",
                states.len()
            )));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trajectory states"));
        }
        Ok(Trajectory {
            states,
            dim,
            dt,
            seed,
            model_id: model_id.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored states (`m + 1`).
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.states.chunks_exact(self.dim)
    }

    pub fn raw(&self) -> &[f64] {
        &self.states
    }
}

/// How a transition over one sampling interval is produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum StepScheme {
    Exact,
    EulerMaruyama { substeps: usize },
}

impl StepScheme {
    /// Exact where the model allows it, otherwise Euler-Maruyama with the
    /// default internal step (1e-4 deterministic, 1e-3 stochastic).
    pub fn default_for(model: &DynamicsModel, dt: f64) -> StepScheme {
        if model.has_exact_transition() {
            StepScheme::Exact
        } else {
            let delta = if model.is_stochastic() { 1e-3 } else { 1e-4 };
            StepScheme::EulerMaruyama {
                substeps: ((dt / delta).round() as usize).max(1),
            }
        }
    }

    fn advance<R: Rng + ?Sized>(&self, model: &DynamicsModel, s: &[f64], dt: f64, rng: &mut R) -> Result<Vec<f64>> {
        match *self {
            StepScheme::Exact => model.exact_step(s, dt, rng),
            StepScheme::EulerMaruyama { substeps } => model.euler_maruyama(s, dt, substeps.max(1), rng),
        }
    }
}

/// Simulates `m` sampling intervals from `s0` with Euler-Maruyama (`substeps`
/// internal steps per interval; plain Euler when the model has no noise).
pub fn simulate_trajectory(
    model: &DynamicsModel,
    s0: &[f64],
    dt: f64,
    m: usize,
    substeps: usize,
    seed: u64,
) -> Result<Trajectory> {
    if substeps == 0 {
        return Err(Error::InvalidParameter("substeps must be >= 1".into()));
    }
    let mut rng = stream_rng(seed, 0);
    simulate_with(model, s0, dt, m, StepScheme::EulerMaruyama { substeps }, seed, &mut rng)
}

pub fn simulate_with<R: Rng + ?Sized>(
    model: &DynamicsModel,
    s0: &[f64],
    dt: f64,
    m: usize,
    scheme: StepScheme,
    seed: u64,
    rng: &mut R,
) -> Result<Trajectory> {
    model.check_dim(s0)?;
    if !(dt > 0.0) || m == 0 {
        return Err(Error::InvalidParameter(format!("need dt > 0 and m >= 1 (dt={dt}, m={m})")));
    }
    let d = s0.len();
    let mut states = Vec::with_capacity((m + 1) * d);
    states.extend_from_slice(s0);
    let mut cur = s0.to_vec();
    for step in 1..=m {
        cur = scheme.advance(model, &cur, dt, rng)?;
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { step });
        }
        states.extend_from_slice(&cur);
    }
    Trajectory::new(states, d, dt, seed, model.id())
}

/// Initial-state distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSampler {
    /// I.i.d. uniform on the box `[lo, hi]`.
    UniformBox { lo: Vec<f64>, hi: Vec<f64> },
    /// `n` equispaced points on `[lo, hi]`, endpoints included (1D).
    UniformMesh { lo: f64, hi: f64 },
    /// Cycles through the given states.
    Fixed { states: Vec<Vec<f64>> },
}

impl InitialSampler {
    pub fn dim(&self) -> usize {
        match self {
            InitialSampler::UniformBox { lo, .. } => lo.len(),
            InitialSampler::UniformMesh { .. } => 1,
            InitialSampler::Fixed { states } => states.first().map_or(0, |s| s.len()),
        }
    }

    /// State `i` of `n`; `rng` is only consumed by random samplers.
    pub fn draw<R: Rng + ?Sized>(&self, i: usize, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            InitialSampler::UniformBox { lo, hi } => lo
                .iter()
                .zip(hi)
                .map(|(l, h)| l + (h - l) * rng.random::<f64>())
                .collect(),
            InitialSampler::UniformMesh { lo, hi } => {
                if n <= 1 {
                    vec![*lo]
                } else {
                    vec![lo + (hi - lo) * i as f64 / (n - 1) as f64]
                }
            }
            InitialSampler::Fixed { states } => states[i % states.len()].clone(),
        }
    }
}

/// `n` independent one-step transitions `(s_i, s_i')`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionPairs {
    starts: Vec<f64>,
    ends: Vec<f64>,
    dim: usize,
    pub dt: f64,
    pub rewards: Vec<f64>,
}

impl TransitionPairs {
    pub fn new(starts: Vec<f64>, ends: Vec<f64>, dim: usize, dt: f64, rewards: Vec<f64>) -> Result<Self> {
        if dim == 0 || starts.len() % dim != 0 {
            return Err(Error::InvalidParameter("start rows must have dim entries".into()));
        }
        if starts.len() != ends.len() {
            return Err(Error::DimensionMismatch {
                expected: starts.len() / dim,
                got: ends.len() / dim,
            });
        }
        if rewards.len() != starts.len() / dim {
            return Err(Error::DimensionMismatch {
                expected: starts.len() / dim,
                got: rewards.len(),
            });
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if starts.iter().chain(&ends).chain(&rewards).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transition pairs"));
        }
        Ok(TransitionPairs {
            starts,
            ends,
            dim,
            dt,
            rewards,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn start(&self, i: usize) -> &[f64] {
        &self.starts[i * self.dim..(i + 1) * self.dim]
    }

    pub fn end(&self, i: usize) -> &[f64] {
        &self.ends[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn sample_transition_pairs<F>(
    model: &DynamicsModel,
    initial: &InitialSampler,
    dt: f64,
    n: usize,
    scheme: StepScheme,
    seed: u64,
    reward: F,
) -> Result<TransitionPairs>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if n == 0 {
        return Err(Error::InvalidParameter("need at least one pair".into()));
    }
    let d = model.dim();
    if initial.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: initial.dim(),
        });
    }
    // Exact linear-Gaussian laws are built once rather than per pair.
    let nd_law = match (model, scheme) {
        (DynamicsModel::LinearNd { a, sigma_diag }, StepScheme::Exact) => {
            Some(GaussianLinearLaw::new(a, sigma_diag, dt)?)
        }
        _ => None,
    };
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(PAIR_CHUNK)
        .map(|lo| (lo, (lo + PAIR_CHUNK).min(n)))
        .collect();
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = chunks
        .par_iter()
        .enumerate()
        .map(|(c, &(lo, hi))| {
            let mut rng = stream_rng(seed, c as u64);
            let mut starts = Vec::with_capacity((hi - lo) * d);
            let mut ends = Vec::with_capacity((hi - lo) * d);
            for i in lo..hi {
                let s = initial.draw(i, n, &mut rng);
                let e = match &nd_law {
                    Some(law) => law.sample(&s, &mut rng),
                    None => scheme.advance(model, &s, dt, &mut rng)?,
                };
                if e.iter().any(|v| !v.is_finite()) {
                    return Err(Error::SimulationDiverged { step: i });
                }
                starts.extend_from_slice(&s);
                ends.extend_from_slice(&e);
            }
            Ok((starts, ends))
        })
        .collect();
    let mut starts = Vec::with_capacity(n * d);
    let mut ends = Vec::with_capacity(n * d);
    for part in parts {
        let (s, e) = part?;
        starts.extend(s);
        ends.extend(e);
    }
    let rewards = starts.chunks_exact(d).map(&reward).collect();
    TransitionPairs::new(starts, ends, d, dt, rewards)
}

/// `count` trajectories of `m` intervals each, trajectory `l` on stream `l`.
pub fn simulate_batch(
    model: &DynamicsModel,
    initial: &InitialSampler,
    dt: f64,
    m: usize,
    count: usize,
    scheme: StepScheme,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let d = model.dim();
    if initial.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: initial.dim(),
        });
    }
    (0..count)
        .into_par_iter()
        .map(|l| {
            let mut rng = stream_rng(seed, l as u64);
            let s0 = initial.draw(l, count, &mut rng);
            simulate_with(model, &s0, dt, m, scheme, seed, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_examples() {
        let lin = DynamicsModel::Linear1D { lambda: 0.05 };
        assert!((lin.drift(&[2.0]).unwrap()[0] - 0.1).abs() < 1e-15);
        let sin = DynamicsModel::NonlinearSin1D { lambda: 0.1 };
        assert!((sin.drift(&[std::f64::consts::FRAC_PI_2]).unwrap()[0] - 0.1).abs() < 1e-15);
        let cubic = DynamicsModel::CubicStabilization1D {
            kappa: 0.1,
            alpha: 0.1,
            b: 0.1,
            gain: 2.0,
            sigma: 0.0,
        };
        assert!((cubic.drift(&[1.0]).unwrap()[0] + 0.2).abs() < 1e-15);
        assert!(matches!(
            lin.drift(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 1, got: 2 })
        ));
    }

    #[test]
    fn euler_linear_flow_matches_exponential() {
        let lin = DynamicsModel::Linear1D { lambda: 0.05 };
        let t = simulate_trajectory(&lin, &[1.0], 5.0, 1, 50_000, 7).unwrap();
        assert_eq!(t.len(), 2);
        assert!((t.state(1)[0] - 0.25f64.exp()).abs() < 1e-4);
        assert!((t.state(1)[0] - 1.284025).abs() < 1e-4);
    }

    #[test]
    fn frozen_ou_is_constant() {
        let ou = DynamicsModel::Ou1D { lambda: 0.0, sigma: 0.0 };
        let t = simulate_trajectory(&ou, &[0.7], 0.5, 10, 10, 3).unwrap();
        assert!(t.states().all(|s| s[0] == 0.7));
    }

    #[test]
    fn divergence_names_step() {
        let blowup = DynamicsModel::CubicStabilization1D {
            kappa: -1.0,
            alpha: 0.0,
            b: 0.0,
            gain: 0.0,
            sigma: 0.0,
        };
        match simulate_trajectory(&blowup, &[10.0], 1.0, 5, 10, 0) {
            Err(Error::SimulationDiverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn ou_moments_examples() {
        let (m, v) = ou_transition_moments(0.05, 1.0, 1.0, 1.0);
        assert!((m - 1.0512711).abs() < 1e-7);
        assert!((v - 1.0517092).abs() < 1e-7);
        let (_, v0) = ou_transition_moments(0.0, 1.0, 3.0, 2.0);
        assert_eq!(v0, 2.0);
        assert_eq!(ou_transition_moments(0.05, 1.0, 1.5, 0.0), (1.5, 0.0));
    }

    #[test]
    fn exact_linear_examples() {
        assert!((exact_linear_step_scalar(0.05, 1.0, 5.0) - 1.2840254).abs() < 1e-7);
        let a = DMatrix::from_row_slice(2, 2, &[0.1, -0.3, 0.2, -0.5]);
        let s = [0.4, -1.2];
        assert_eq!(exact_linear_step(&a, &s, 0.0).unwrap(), s.to_vec());
        let zero = DMatrix::zeros(2, 2);
        assert_eq!(exact_linear_step(&zero, &s, 3.0).unwrap(), s.to_vec());
        // composition
        let mut x = s.to_vec();
        for _ in 0..4 {
            x = exact_linear_step(&a, &x, 0.3).unwrap();
        }
        let y = exact_linear_step(&a, &s, 1.2).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            assert!((xi - yi).abs() <= 1e-10 * yi.abs().max(1e-300));
        }
    }

    #[test]
    fn van_loan_matches_ou_in_one_dimension() {
        let a = DMatrix::from_element(1, 1, 0.05);
        let sig = DVector::from_element(1, 1.0);
        let law = GaussianLinearLaw::new(&a, &sig, 1.0).unwrap();
        let (m, v) = ou_transition_moments(0.05, 1.0, 1.0, 1.0);
        assert!((law.mean(&[1.0])[0] - m).abs() < 1e-12);
        assert!((law.covariance[(0, 0)] - v).abs() < 1e-12);
    }

    #[test]
    fn mesh_starts() {
        let mesh = InitialSampler::UniformMesh { lo: -1.0, hi: 1.0 };
        let p = sample_transition_pairs(
            &DynamicsModel::Ou1D { lambda: 0.05, sigma: 1.0 },
            &mesh,
            0.1,
            5,
            StepScheme::Exact,
            1,
            |_| 0.0,
        )
        .unwrap();
        let starts: Vec<f64> = (0..5).map(|i| p.start(i)[0]).collect();
        assert_eq!(starts, vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn exact_linear_pairs_scale_by_flow() {
        let p = sample_transition_pairs(
            &DynamicsModel::Linear1D { lambda: 0.05 },
            &InitialSampler::UniformBox {
                lo: vec![-3.0],
                hi: vec![3.0],
            },
            5.0,
            50,
            StepScheme::Exact,
            9,
            |s| s[0] * s[0],
        )
        .unwrap();
        for i in 0..p.len() {
            assert!((p.end(i)[0] - 1.2840254166877414 * p.start(i)[0]).abs() < 1e-12);
            assert_eq!(p.rewards[i], p.start(i)[0].powi(2));
        }
    }

    #[test]
    fn pairs_are_reproducible() {
        let ou = DynamicsModel::Ou1D { lambda: 0.05, sigma: 1.0 };
        let init = InitialSampler::UniformBox {
            lo: vec![-1.0],
            hi: vec![1.0],
        };
        let a = sample_transition_pairs(&ou, &init, 1.0, 4, StepScheme::Exact, 42, |_| 0.0).unwrap();
        let b = sample_transition_pairs(&ou, &init, 1.0, 4, StepScheme::Exact, 42, |_| 0.0).unwrap();
        assert_eq!(a, b);
        let c = sample_transition_pairs(&ou, &init, 1.0, 4, StepScheme::Exact, 43, |_| 0.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn trajectories_are_reproducible() {
        let ou = DynamicsModel::Ou1D { lambda: 0.05, sigma: 1.0 };
        let a = simulate_trajectory(&ou, &[0.3], 0.1, 20, 10, 5).unwrap();
        let b = simulate_trajectory(&ou, &[0.3], 0.1, 20, 10, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sin2_flow_matches_fine_euler() {
        let model = DynamicsModel::NonlinearSin1D { lambda: 0.3 };
        let mut rng = stream_rng(0, 0);
        for s0 in [-3.0, -1.2, -0.01, 0.4, 2.9, 7.0] {
            let euler = model.euler_maruyama(&[s0], 2.0, 200_000, &mut rng).unwrap()[0];
            let exact = sin2_flow(0.3, s0, 2.0);
            assert!((euler - exact).abs() < 1e-4, "{s0}: {euler} vs {exact}");
        }
        assert_eq!(sin2_flow(0.3, PI, 5.0), PI);
        assert_eq!(sin2_flow(0.3, 0.0, 5.0), 0.0);
    }
}
