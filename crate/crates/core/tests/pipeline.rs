//! Simulate, serialize, parse and solve, checking the data-driven solvers
//! against the designed value function.

use std::f64::consts::PI;

use phibe::basis::Basis;
use phibe::dynamics::{simulate_batch, DynamicsModel, InitialSampler, StepScheme};
use phibe::fdcoeff::fd_coefficients;
use phibe::galerkin::{designed_reward, Cos3};
use phibe::io::{parse_trajectories_csv, trajectories_to_csv};
use phibe::metrics::l2_error;
use phibe::modelfree::{accumulate_lstd, accumulate_phibe, solve_empirical, EmpiricalSystem, Rewards};
use phibe::quadrature::Quadrature;

#[test]
fn csv_round_trip_preserves_solutions() {
    let model = DynamicsModel::Linear1D { lambda: 0.05 };
    let (beta, dt) = (0.1, 1.0);
    let initial = InitialSampler::UniformBox {
        lo: vec![-PI],
        hi: vec![PI],
    };
    let trajs = simulate_batch(&model, &initial, dt, 3, 200, StepScheme::Exact, 4).unwrap();
    let reward = designed_reward(&model, beta, 1.0).unwrap();
    let rewards: Vec<Vec<f64>> = trajs.iter().map(|t| t.states().map(&reward).collect()).collect();
    let text = trajectories_to_csv(&trajs, Some(&rewards)).unwrap();
    let data = parse_trajectories_csv(&text, dt).unwrap();
    let obs = data.rewards.as_deref().unwrap();

    let basis = Basis::FourierPeriodic { modes: 4 };
    let coeffs = fd_coefficients(2).unwrap();
    let solve = |trajs: &[phibe::dynamics::Trajectory], rewards: Rewards<'_>| {
        let mut sys = EmpiricalSystem::new(basis.len());
        accumulate_phibe(&mut sys, trajs, rewards, beta, &coeffs, &basis, false).unwrap();
        solve_empirical(&sys, &basis).unwrap()
    };
    let direct = solve(&trajs, Rewards::Function(&reward));
    let parsed = solve(&data.trajectories, Rewards::Observed(obs));
    let gap = (&direct.theta - &parsed.theta).amax();
    // CSV stores shortest round-trip decimals, so the systems agree to rounding.
    assert!(gap < 1e-9, "theta gap {gap}");

    let quad = Quadrature::gauss_legendre(-PI, PI, 400).unwrap();
    let truth = |s: &[f64]| Cos3 { k: 1.0 }.value(s[0]);
    let phibe_err = l2_error(&parsed, &truth, &quad).unwrap();

    let mut sys = EmpiricalSystem::new(basis.len());
    accumulate_lstd(&mut sys, &data.trajectories, Rewards::Observed(obs), beta, &basis).unwrap();
    let lstd = solve_empirical(&sys, &basis).unwrap();
    let lstd_err = l2_error(&lstd, &truth, &quad).unwrap();
    assert!(phibe_err < lstd_err, "phibe {phibe_err} vs lstd {lstd_err}");
}
