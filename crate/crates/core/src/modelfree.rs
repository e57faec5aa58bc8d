//! Data-driven least-squares solvers built from trajectories or transition pairs.

use nalgebra::{DMatrix, DVector};

use crate::basis::Basis;
use crate::dynamics::{Trajectory, TransitionPairs};
use crate::error::{Error, Result};
use crate::estimators::{mu_bar_into, sigma_bar_into};
use crate::fdcoeff::FdCoefficients;
use crate::galerkin::{solve_counted, LinearSystem, ValueApprox};

/// Windows buffered before one rank-`BLOCK` update.
const BLOCK: usize = 1024;

/// Running sums `A = sum Phi(s) g(s)^T`, `b = sum r Phi(s)` with compensated
/// accumulation. Normalization by `count` happens at solve time.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalSystem {
    a: DMatrix<f64>,
    a_comp: DMatrix<f64>,
    b: DVector<f64>,
    b_comp: DVector<f64>,
    count: usize,
}

impl EmpiricalSystem {
    pub fn new(p: usize) -> Self {
        EmpiricalSystem {
            a: DMatrix::zeros(p, p),
            a_comp: DMatrix::zeros(p, p),
            b: DVector::zeros(p),
            b_comp: DVector::zeros(p),
            count: 0,
        }
    }

    /// Builds an accumulator holding `(a, b)` as if from `count` windows.
    pub fn from_parts(a: DMatrix<f64>, b: DVector<f64>, count: usize) -> Result<Self> {
        let sys = LinearSystem::new(a, b)?;
        let p = sys.b.len();
        Ok(EmpiricalSystem {
            a: sys.a,
            a_comp: DMatrix::zeros(p, p),
            b: sys.b,
            b_comp: DVector::zeros(p),
            count,
        })
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn a_sum(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b_sum(&self) -> &DVector<f64> {
        &self.b
    }

    /// Combines partial sums from a disjoint data partition.
    pub fn merge(&mut self, other: &EmpiricalSystem) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        kahan_add(self.a.as_mut_slice(), self.a_comp.as_mut_slice(), other.a.as_slice());
        kahan_add(self.a.as_mut_slice(), self.a_comp.as_mut_slice(), &neg(other.a_comp.as_slice()));
        kahan_add(self.b.as_mut_slice(), self.b_comp.as_mut_slice(), other.b.as_slice());
        kahan_add(self.b.as_mut_slice(), self.b_comp.as_mut_slice(), &neg(other.b_comp.as_slice()));
        self.count += other.count;
        Ok(())
    }

    /// `(A / count, b / count)`.
    pub fn normalized(&self) -> Result<LinearSystem> {
        if self.count == 0 {
            return Err(Error::InvalidParameter("empirical system absorbed no windows".into()));
        }
        let n = self.count as f64;
        LinearSystem::new(&self.a / n, &self.b / n)
    }

    fn absorb(&mut self, block: &Block) {
        if block.len == 0 {
            return;
        }
        let p = self.dim();
        let mut prod = DMatrix::<f64>::zeros(p, p);
        prod.gemm(
            1.0,
            &block.left.columns(0, block.len),
            &block.right.columns(0, block.len).transpose(),
            0.0,
        );
        kahan_add(self.a.as_mut_slice(), self.a_comp.as_mut_slice(), prod.as_slice());
        kahan_add(self.b.as_mut_slice(), self.b_comp.as_mut_slice(), block.b.as_slice());
        self.count += block.len;
    }
}

fn neg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| -x).collect()
}

fn kahan_add(sum: &mut [f64], comp: &mut [f64], add: &[f64]) {
    for ((s, c), x) in sum.iter_mut().zip(comp.iter_mut()).zip(add) {
        let y = x - *c;
        let t = *s + y;
        *c = (t - *s) - y;
        *s = t;
    }
}

/// Column buffers of `Phi(s)` and the row integrand `g(s)`.
struct Block {
    left: DMatrix<f64>,
    right: DMatrix<f64>,
    b: DVector<f64>,
    len: usize,
    p: usize,
}

impl Block {
    fn new(p: usize) -> Self {
        Block {
            left: DMatrix::zeros(p, BLOCK),
            right: DMatrix::zeros(p, BLOCK),
            b: DVector::zeros(p),
            len: 0,
            p,
        }
    }

    /// Slots for the next window: `(phi, g)`.
    fn slots(&mut self) -> (&mut [f64], &mut [f64]) {
        let p = self.p;
        let c = self.len;
        (
            &mut self.left.as_mut_slice()[c * p..(c + 1) * p],
            &mut self.right.as_mut_slice()[c * p..(c + 1) * p],
        )
    }

    fn commit(&mut self, reward: f64, sys: &mut EmpiricalSystem) -> Result<()> {
        let p = self.p;
        let c = self.len;
        let phi = &self.left.as_slice()[c * p..(c + 1) * p];
        let g = &self.right.as_slice()[c * p..(c + 1) * p];
        if !reward.is_finite() || phi.iter().chain(g).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("empirical update"));
        }
        for k in 0..p {
            self.b[k] += reward * phi[k];
        }
        self.len += 1;
        if self.len == BLOCK {
            self.flush(sys);
        }
        Ok(())
    }

    fn flush(&mut self, sys: &mut EmpiricalSystem) {
        sys.absorb(self);
        self.len = 0;
        self.b.fill(0.0);
    }
}

/// Reward observations for trajectory data.
#[derive(Clone, Copy)]
pub enum Rewards<'a> {
    /// Evaluated at each anchor state.
    Function(&'a (dyn Fn(&[f64]) -> f64 + Sync)),
    /// One observed value per stored state of each trajectory.
    Observed(&'a [Vec<f64>]),
}

impl Rewards<'_> {
    fn check(&self, trajectories: &[Trajectory]) -> Result<()> {
        if let Rewards::Observed(obs) = self {
            if obs.len() != trajectories.len() {
                return Err(Error::MisalignedRewards {
                    trajectory: obs.len().min(trajectories.len()),
                    expected: trajectories.len(),
                    got: obs.len(),
                });
            }
            for (l, (t, r)) in trajectories.iter().zip(obs.iter()).enumerate() {
                if r.len() != t.len() {
                    return Err(Error::MisalignedRewards {
                        trajectory: l,
                        expected: t.len(),
                        got: r.len(),
                    });
                }
            }
        }
        Ok(())
    }

    fn at(&self, traj: usize, j: usize, s: &[f64]) -> f64 {
        match self {
            Rewards::Function(f) => f(s),
            Rewards::Observed(obs) => obs[traj][j],
        }
    }
}

fn check_basis(basis: &Basis, sys: &EmpiricalSystem, dim: usize) -> Result<()> {
    if basis.len() != sys.dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.dim(),
            got: basis.len(),
        });
    }
    if basis.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: dim,
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

/// Adds one update `Phi(s)[beta Phi - mu_bar . grad Phi - 1/2 Sigma_bar : Hess Phi]^T`,
/// `r Phi(s)` per window `j = 0..m-i` of every trajectory. The second-order term is
/// included only when `stochastic` is set.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_phibe(
    sys: &mut EmpiricalSystem,
    trajectories: &[Trajectory],
    rewards: Rewards<'_>,
    beta: f64,
    coeffs: &FdCoefficients,
    basis: &Basis,
    stochastic: bool,
) -> Result<()> {
    check_positive("beta", beta)?;
    rewards.check(trajectories)?;
    let order = coeffs.order();
    let p = basis.len();
    let mut block = Block::new(p);
    for (l, traj) in trajectories.iter().enumerate() {
        let d = traj.dim();
        check_basis(basis, sys, d)?;
        if traj.len() < order + 1 {
            return Err(Error::WindowLength {
                order,
                got: traj.len(),
            });
        }
        let mut mu = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        let mut window: Vec<&[f64]> = Vec::with_capacity(order + 1);
        for j in 0..traj.len() - order {
            window.clear();
            window.extend((j..=j + order).map(|k| traj.state(k)));
            mu_bar_into(&window, traj.dt, coeffs, &mut mu);
            if stochastic {
                sigma_bar_into(&window, traj.dt, coeffs, &mut sigma);
            }
            let s = traj.state(j);
            let (phi, g) = block.slots();
            basis.shifted_generator_into(s, beta, &mu, stochastic.then_some(&sigma[..]), phi, g);
            let r = rewards.at(l, j, s);
            block.commit(r, sys)?;
        }
    }
    block.flush(sys);
    Ok(())
}

/// First-order update from independent pairs: `mu_bar = (s' - s)/dt`,
/// `Sigma_bar = (s' - s)(s' - s)^T/dt`, rewards taken from the pairs.
pub fn accumulate_pairs_first_order(
    sys: &mut EmpiricalSystem,
    pairs: &TransitionPairs,
    beta: f64,
    basis: &Basis,
    stochastic: bool,
) -> Result<()> {
    check_positive("beta", beta)?;
    let d = pairs.dim();
    check_basis(basis, sys, d)?;
    let dt = pairs.dt;
    let mut block = Block::new(basis.len());
    let mut mu = vec![0.0; d];
    let mut sigma = vec![0.0; d * d];
    for i in 0..pairs.len() {
        let (s, e) = (pairs.start(i), pairs.end(i));
        for k in 0..d {
            mu[k] = (e[k] - s[k]) / dt;
        }
        if stochastic {
            for a in 0..d {
                let da = e[a] - s[a];
                for c in a..d {
                    let v = da * (e[c] - s[c]) / dt;
                    sigma[a * d + c] = v;
                    sigma[c * d + a] = v;
                }
            }
        }
        let (phi, g) = block.slots();
        basis.shifted_generator_into(s, beta, &mu, stochastic.then_some(&sigma[..]), phi, g);
        block.commit(pairs.rewards[i], sys)?;
    }
    block.flush(sys);
    Ok(())
}

/// LSTD update `Phi(s_j)[Phi(s_j) - e^{-beta dt} Phi(s_{j+1})]^T`, `r(s_j) dt Phi(s_j)`
/// over consecutive states of each trajectory.
pub fn accumulate_lstd(
    sys: &mut EmpiricalSystem,
    trajectories: &[Trajectory],
    rewards: Rewards<'_>,
    beta: f64,
    basis: &Basis,
) -> Result<()> {
    check_positive("beta", beta)?;
    rewards.check(trajectories)?;
    let p = basis.len();
    let mut block = Block::new(p);
    let mut next = vec![0.0; p];
    for (l, traj) in trajectories.iter().enumerate() {
        check_basis(basis, sys, traj.dim())?;
        if traj.len() < 2 {
            return Err(Error::WindowLength { order: 1, got: traj.len() });
        }
        let dt = traj.dt;
        let gamma = (-beta * dt).exp();
        for j in 0..traj.len() - 1 {
            let s = traj.state(j);
            basis.values_into(traj.state(j + 1), &mut next);
            let (phi, g) = block.slots();
            basis.values_into(s, phi);
            for k in 0..p {
                g[k] = phi[k] - gamma * next[k];
            }
            let r = rewards.at(l, j, s) * dt;
            block.commit(r, sys)?;
        }
    }
    block.flush(sys);
    Ok(())
}

/// LSTD over independent pairs.
pub fn accumulate_lstd_pairs(sys: &mut EmpiricalSystem, pairs: &TransitionPairs, beta: f64, basis: &Basis) -> Result<()> {
    check_positive("beta", beta)?;
    check_basis(basis, sys, pairs.dim())?;
    let p = basis.len();
    let dt = pairs.dt;
    let gamma = (-beta * dt).exp();
    let mut block = Block::new(p);
    let mut next = vec![0.0; p];
    for i in 0..pairs.len() {
        basis.values_into(pairs.end(i), &mut next);
        let (phi, g) = block.slots();
        basis.values_into(pairs.start(i), phi);
        for k in 0..p {
            g[k] = phi[k] - gamma * next[k];
        }
        block.commit(pairs.rewards[i] * dt, sys)?;
    }
    block.flush(sys);
    Ok(())
}

/// Solves the normalized system. `diagnostics.count < basis.len()` marks an
/// underdetermined fit; see [`EmpiricalSystem::is_underdetermined`].
pub fn solve_empirical(sys: &EmpiricalSystem, basis: &Basis) -> Result<ValueApprox> {
    let normalized = sys.normalized()?;
    solve_counted(&normalized, basis, sys.count)
}

impl EmpiricalSystem {
    /// Fewer windows than unknowns.
    pub fn is_underdetermined(&self) -> bool {
        self.count < self.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{sample_transition_pairs, simulate_batch, DynamicsModel, InitialSampler, StepScheme};
    use crate::estimators::OuMoments;
    use crate::fdcoeff::fd_coefficients;
    use crate::galerkin::{assemble_phibe, designed_reward, solve};
    use crate::metrics::l2_error;
    use crate::quadrature::{Quadrature, Weight};
    use std::f64::consts::PI;

    fn ou_data(n: usize, seed: u64) -> (Vec<Trajectory>, DynamicsModel) {
        let model = DynamicsModel::Ou1D { lambda: 0.05, sigma: 1.0 };
        let init = InitialSampler::UniformBox { lo: vec![-PI], hi: vec![PI] };
        let trajs = simulate_batch(&model, &init, 0.5, 3, n, StepScheme::Exact, seed).unwrap();
        (trajs, model)
    }

    #[test]
    fn single_window_constant_basis() {
        let basis = Basis::Monomial1D { degree: 0 };
        let t = Trajectory::new(vec![0.3, 0.7], 1, 0.5, 0, "x").unwrap();
        let c = fd_coefficients(1).unwrap();
        let mut sys = EmpiricalSystem::new(1);
        accumulate_phibe(&mut sys, &[t], Rewards::Function(&|_| 3.0), 0.25, &c, &basis, true).unwrap();
        assert_eq!(sys.count(), 1);
        assert_eq!(sys.a_sum()[(0, 0)], 0.25);
        let v = solve_empirical(&sys, &basis).unwrap();
        assert!((v.theta[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn misaligned_rewards_rejected() {
        let basis = Basis::Monomial1D { degree: 1 };
        let t = Trajectory::new(vec![0.0, 1.0, 2.0], 1, 1.0, 0, "x").unwrap();
        let c = fd_coefficients(1).unwrap();
        let mut sys = EmpiricalSystem::new(2);
        let obs = vec![vec![1.0, 2.0]];
        let err = accumulate_phibe(&mut sys, &[t], Rewards::Observed(&obs), 1.0, &c, &basis, false).unwrap_err();
        assert!(matches!(err, Error::MisalignedRewards { trajectory: 0, expected: 3, got: 2 }));
    }

    #[test]
    fn frozen_pairs_reduce_to_gram() {
        let basis = Basis::Monomial1D { degree: 1 };
        let starts = vec![-1.0, -0.2, 0.5, 0.9];
        let rewards: Vec<f64> = starts.iter().map(|s| 1.0 + s).collect();
        let pairs = TransitionPairs::new(starts.clone(), starts.clone(), 1, 0.1, rewards).unwrap();
        let mut sys = EmpiricalSystem::new(2);
        accumulate_pairs_first_order(&mut sys, &pairs, 2.0, &basis, true).unwrap();
        let mut gram = DMatrix::<f64>::zeros(2, 2);
        for s in &starts {
            let phi = [1.0, *s];
            for k in 0..2 {
                for l in 0..2 {
                    gram[(k, l)] += 2.0 * phi[k] * phi[l];
                }
            }
        }
        assert!((sys.a_sum() - gram).amax() < 1e-14);
        let v = solve_empirical(&sys, &basis).unwrap();
        assert!((v.theta[0] - 0.5).abs() < 1e-12 && (v.theta[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn lstd_constant_basis_fixed_point() {
        let basis = Basis::Monomial1D { degree: 0 };
        let (trajs, _) = ou_data(5, 1);
        let (beta, dt) = (0.3, 0.5);
        let mut sys = EmpiricalSystem::new(1);
        accumulate_lstd(&mut sys, &trajs, Rewards::Function(&|_| 2.0), beta, &basis).unwrap();
        let v = solve_empirical(&sys, &basis).unwrap();
        let want = 2.0 * dt / (1.0 - (-beta * dt).exp());
        assert!((v.theta[0] - want).abs() < 1e-10 * want);
    }

    #[test]
    fn lstd_large_discount_is_projection() {
        let basis = Basis::Monomial1D { degree: 1 };
        let starts = vec![-1.0, 0.0, 1.0];
        let ends = vec![5.0, 6.0, 7.0];
        let rewards = vec![1.0, 2.0, 3.0];
        let pairs = TransitionPairs::new(starts, ends, 1, 1.0, rewards).unwrap();
        let mut sys = EmpiricalSystem::new(2);
        accumulate_lstd_pairs(&mut sys, &pairs, 800.0, &basis).unwrap();
        let v = solve_empirical(&sys, &basis).unwrap();
        assert!((v.theta[0] - 2.0).abs() < 1e-12 && (v.theta[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplication_and_permutation_invariance() {
        let (mut trajs, model) = ou_data(200, 3);
        let r = designed_reward(&model, 0.1, 1.0).unwrap();
        let basis = Basis::FourierPeriodic { modes: 4 };
        let c = fd_coefficients(2).unwrap();
        let run = |ts: &[Trajectory]| {
            let mut sys = EmpiricalSystem::new(basis.len());
            accumulate_phibe(&mut sys, ts, Rewards::Function(&r), 0.1, &c, &basis, true).unwrap();
            solve_empirical(&sys, &basis).unwrap().theta
        };
        let base = run(&trajs);
        let mut doubled = trajs.clone();
        doubled.extend(trajs.clone());
        let dup = run(&doubled);
        assert!((&dup - &base).amax() <= 1e-9 * base.amax());
        trajs.reverse();
        trajs.swap(3, 150);
        let perm = run(&trajs);
        assert!((&perm - &base).amax() <= 1e-9 * base.amax());
    }

    #[test]
    fn merge_equals_single_pass() {
        let (trajs, model) = ou_data(120, 9);
        let r = designed_reward(&model, 0.1, 1.0).unwrap();
        let basis = Basis::FourierPeriodic { modes: 3 };
        let mut whole = EmpiricalSystem::new(basis.len());
        accumulate_lstd(&mut whole, &trajs, Rewards::Function(&r), 0.1, &basis).unwrap();
        let mut left = EmpiricalSystem::new(basis.len());
        let mut right = EmpiricalSystem::new(basis.len());
        accumulate_lstd(&mut left, &trajs[..70], Rewards::Function(&r), 0.1, &basis).unwrap();
        accumulate_lstd(&mut right, &trajs[70..], Rewards::Function(&r), 0.1, &basis).unwrap();
        left.merge(&right).unwrap();
        assert_eq!(left.count(), whole.count());
        assert!((left.a_sum() - whole.a_sum()).amax() <= 1e-9 * whole.a_sum().amax());
    }

    #[test]
    fn reward_scaling_is_linear() {
        let (trajs, model) = ou_data(50, 4);
        let r = designed_reward(&model, 0.1, 1.0).unwrap();
        let r3 = |s: &[f64]| 3.0 * r(s);
        let basis = Basis::FourierPeriodic { modes: 2 };
        let c = fd_coefficients(1).unwrap();
        let fit = |f: &(dyn Fn(&[f64]) -> f64 + Sync)| {
            let mut sys = EmpiricalSystem::new(basis.len());
            accumulate_phibe(&mut sys, &trajs, Rewards::Function(f), 0.1, &c, &basis, true).unwrap();
            solve_empirical(&sys, &basis).unwrap().theta
        };
        let a = fit(&r);
        let b = fit(&r3);
        assert!((&b - &a * 3.0).amax() <= 1e-12 * a.amax().max(1.0));
    }

    #[test]
    fn identity_accumulator_passthrough() {
        let basis = Basis::Monomial1D { degree: 2 };
        let sys = EmpiricalSystem::from_parts(DMatrix::identity(3, 3) * 5.0, DVector::from_vec(vec![5.0, 10.0, 0.0]), 5).unwrap();
        let v = solve_empirical(&sys, &basis).unwrap();
        assert_eq!(v.theta.as_slice(), &[1.0, 2.0, 0.0]);
        assert!(!sys.is_underdetermined());
        assert!(EmpiricalSystem::new(3).normalized().is_err());
    }

    #[test]
    fn singular_empirical_reports_count() {
        let basis = Basis::Monomial1D { degree: 1 };
        let pairs = TransitionPairs::new(vec![0.5], vec![0.5], 1, 0.1, vec![1.0]).unwrap();
        let mut sys = EmpiricalSystem::new(2);
        accumulate_pairs_first_order(&mut sys, &pairs, 1.0, &basis, true).unwrap();
        assert!(sys.is_underdetermined());
        assert!(matches!(solve_empirical(&sys, &basis), Err(Error::IllConditioned { count: 1, .. })));
    }

    #[test]
    fn pairs_converge_to_model_based_first_order() {
        let (lambda, sigma, beta, dt) = (0.05, 1.0, 0.1, 1.0);
        let model = DynamicsModel::Ou1D { lambda, sigma };
        let r = designed_reward(&model, beta, 1.0).unwrap();
        let basis = Basis::FourierPeriodic { modes: 4 };
        let init = InitialSampler::UniformBox { lo: vec![-PI], hi: vec![PI] };
        let pairs = sample_transition_pairs(&model, &init, dt, 1_000_000, StepScheme::Exact, 11, &r).unwrap();
        let mut sys = EmpiricalSystem::new(basis.len());
        accumulate_pairs_first_order(&mut sys, &pairs, beta, &basis, true).unwrap();
        let data = solve_empirical(&sys, &basis).unwrap();
        let q = Quadrature::gauss_legendre(-PI, PI, 400).unwrap();
        // Uniform sampling density 1/(2 pi) matches the normalized empirical sums.
        let w = Weight::Constant(1.0 / (2.0 * PI));
        let c = fd_coefficients(1).unwrap();
        let prov = OuMoments { lambda, sigma };
        let model_based = solve(&assemble_phibe(&basis, &prov, beta, dt, &c, &q, &w, &r, true).unwrap(), &basis).unwrap();
        let gap = l2_error(&data, &model_based, &Quadrature::gauss_legendre(-PI, PI, 800).unwrap()).unwrap();
        assert!(gap < 0.05, "{gap}");
    }
}
