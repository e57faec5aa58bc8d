//! Preset definitions: default parameters, panels and attached checks.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Map, Value};

use super::{fmt_list, generate_orthogonal_conjugation, Ctx, Preset, Rows};
use crate::basis::Basis;
use crate::dynamics::{
    exact_linear_step_scalar, sample_transition_pairs, simulate_batch, sin2_flow, DynamicsModel, InitialSampler,
    StepScheme,
};
use crate::error::{Error, Result};
use crate::estimators::{FlowMoments, LinearFlowMoments, OuMoments, TransitionMomentProvider};
use crate::fdcoeff::fd_coefficients;
use crate::galerkin::{
    assemble_be_projection, assemble_exact, assemble_phibe, designed_reward, lq_be_value, lq_phibe_residual,
    lq_phibe_value, lq_true_value, lq_true_value_nd, solve, BeRollout, Cos3, LqParams, TransitionLaw, ValueApprox,
};
use crate::metrics::{ErrorReport, ValueFunction};
use crate::modelfree::{
    accumulate_lstd, accumulate_lstd_pairs, accumulate_pairs_first_order, accumulate_phibe, solve_empirical,
    EmpiricalSystem, Rewards,
};
use crate::quadrature::{Quadrature, Weight};

type RewardRef<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

const ASSEMBLY_NODES: usize = 400;
const ERROR_NODES: usize = 800;

pub(super) fn panels(p: Preset) -> &'static [&'static str] {
    match p {
        Preset::Fig1 | Preset::Fig3 => &["a", "b", "c"],
        Preset::Fig4 => &["dt", "data"],
        Preset::Fig5 => &["dt", "data", "budget", "pairs"],
        Preset::Table1 => &["analytic", "data"],
        Preset::Fig8 | Preset::Fig9 => &["data"],
    }
}

pub(super) fn defaults(p: Preset) -> Map<String, Value> {
    let v = match p {
        Preset::Fig1 => json!({
            "lambda": 0.05, "order": 2, "points": 4,
            "a.dt": 5.0, "a.beta": 0.1, "a.k": 1.0, "a.modes": 4, "a.trajectories": 10,
            "b.dt": 0.5, "b.beta": 0.1, "b.k": 10.0, "b.modes": 30, "b.trajectories": 100,
            "c.dt": 0.1, "c.beta": 10.0, "c.k": 1.0, "c.modes": 4, "c.trajectories": 10,
        }),
        Preset::Fig3 => json!({
            "orders": [1, 2], "points": 4, "euler_step": 1e-4,
            "a.dt": 5.0, "a.beta": 0.1, "a.k": 1.0, "a.lambda": 0.1, "a.modes": 4, "a.trajectories": 20,
            "b.dt": 0.1, "b.beta": 10.0, "b.k": 1.0, "b.lambda": 5.0, "b.modes": 4, "b.trajectories": 20,
            "c.dt": 0.1, "c.beta": 10.0, "c.k": 10.0, "c.lambda": 2.0, "c.modes": 30, "c.trajectories": 100,
        }),
        Preset::Fig4 => json!({
            "lambda": 0.05, "beta": 0.1, "k": 1.0, "modes": 4, "orders": [1, 2], "points": 4,
            "dt_grid": [5.0, 2.5, 1.25, 0.625], "slope_tol": 0.35,
            "data.dt": 5.0, "data.trajectories": [10, 100, 1000],
        }),
        Preset::Fig5 => json!({
            "lambda": 0.05, "sigma": 1.0, "beta": 0.1, "k": 1.0, "modes": 4, "orders": [1, 2], "points": 4,
            "dt_grid": [5.0, 2.5, 1.25, 0.625], "slope_tol": 0.35,
            "data.dt": 1.0, "data.trajectories": [1000, 10000, 100000],
            "budget.samples": 400000, "budget.dt_grid": [1.0, 0.1, 0.01], "budget.min_seeds": 14,
            "pairs.dt": 1.0, "pairs.n": [1000, 10000, 100000], "pairs.slope_tol": 0.15,
        }),
        Preset::Table1 => json!({
            "q": 1.0, "r_ctrl": 0.1, "gain": 2.0,
            "alpha": [0.25, 0.25, 1.0, 0.25], "b": [0.25, 0.25, 1.0, 0.25],
            "sigma": [0.5, 0.5, 1.0, 0.5], "beta": [1.0, 1.0, 1.0, 0.1], "dt": [0.1, 0.01, 0.1, 0.1],
            "data.n": 100000, "data.min_cases": 3,
        }),
        Preset::Fig8 => json!({
            "q": 1.0, "r_ctrl": 0.1, "gain": 2.0,
            "kappa": [0.1, 0.1, 0.5, 0.1], "alpha": [0.1, 0.1, 0.5, 0.1], "b": [0.1, 0.1, 0.5, 0.1],
            "sigma": [0.05, 0.05, 0.25, 0.05], "beta": [1.0, 1.0, 1.0, 0.1], "dt": [0.1, 0.01, 0.1, 0.1],
            "n": 100000, "degree": 4, "reference_degree": 8, "euler_step": 1e-3,
        }),
        Preset::Fig9 => json!({
            "dim": 10, "beta": 1.0, "sigma": 0.3, "drift_scale": 0.1,
            "dt": [1.0, 0.1], "n": [10000, 100000], "mc_nodes": 100000, "matrix_seed": 2024,
        }),
    };
    match v {
        Value::Object(m) => m,
        _ => unreachable!("preset defaults are objects"),
    }
}

pub(super) fn run_panel(ctx: &mut Ctx, panel: &str) -> Result<()> {
    match (ctx.preset, panel) {
        (Preset::Fig1, p) => fig1(ctx, p),
        (Preset::Fig3, p) => fig3(ctx, p),
        (Preset::Fig4, "dt") | (Preset::Fig5, "dt") => dt_sweep(ctx),
        (Preset::Fig4, "data") | (Preset::Fig5, "data") => data_sweep(ctx),
        (Preset::Fig5, "budget") => fig5_budget(ctx),
        (Preset::Fig5, "pairs") => fig5_pairs(ctx),
        (Preset::Table1, "analytic") => table1_analytic(ctx),
        (Preset::Table1, "data") => table1_data(ctx),
        (Preset::Fig8, _) => fig8(ctx),
        (Preset::Fig9, _) => fig9(ctx),
        (p, other) => Err(Error::Config(format!("unknown panel {other:?} for {p}"))),
    }
}

fn angle_box() -> InitialSampler {
    InitialSampler::UniformBox {
        lo: vec![-PI],
        hi: vec![PI],
    }
}

fn quads(lo: f64, hi: f64) -> Result<(Quadrature, Quadrature)> {
    Ok((
        Quadrature::gauss_legendre(lo, hi, ASSEMBLY_NODES)?,
        Quadrature::gauss_legendre(lo, hi, ERROR_NODES)?,
    ))
}

fn cos3(k: f64) -> impl Fn(&[f64]) -> f64 + Send + Sync + Copy {
    move |s: &[f64]| Cos3 { k }.value(s[0])
}

fn row(
    method: String,
    order: usize,
    dt: f64,
    n: usize,
    seed: u64,
    truth: &dyn ValueFunction,
    approx: Result<ValueApprox>,
    quad: &Quadrature,
    weight: &Weight,
) -> (String, Result<ErrorReport>) {
    let label = format!("{method}/{order}");
    let rep = approx.and_then(|v| ErrorReport::measure(method, order, dt, n, seed, truth, &v, quad, weight));
    (label, rep)
}

/// Model-free solves from batches of short trajectories.
struct TrajectoryCell<'a> {
    prefix: String,
    model: DynamicsModel,
    scheme: StepScheme,
    dt: f64,
    points: usize,
    beta: f64,
    basis: Basis,
    orders: Vec<usize>,
    reward: RewardRef<'a>,
    truth: &'a dyn ValueFunction,
    quad: &'a Quadrature,
}

impl TrajectoryCell<'_> {
    fn rows(&self, count: usize, seed: u64) -> Result<Rows> {
        if self.points < 2 {
            return Err(Error::InvalidParameter("points must be >= 2".into()));
        }
        let trajs = simulate_batch(
            &self.model,
            &angle_box(),
            self.dt,
            self.points - 1,
            count,
            self.scheme,
            seed,
        )?;
        let n = count * self.points;
        let stochastic = self.model.is_stochastic();
        let mut rows = Vec::new();
        for &order in &self.orders {
            let v = fd_coefficients(order).and_then(|c| {
                let mut sys = EmpiricalSystem::new(self.basis.len());
                accumulate_phibe(&mut sys, &trajs, Rewards::Function(self.reward), self.beta, &c, &self.basis, stochastic)?;
                solve_empirical(&sys, &self.basis)
            });
            rows.push(row(
                format!("{}:phibe_mf", self.prefix),
                order,
                self.dt,
                n,
                seed,
                self.truth,
                v,
                self.quad,
                &Weight::Lebesgue,
            ));
        }
        let mut sys = EmpiricalSystem::new(self.basis.len());
        let v = accumulate_lstd(&mut sys, &trajs, Rewards::Function(self.reward), self.beta, &self.basis)
            .and_then(|_| solve_empirical(&sys, &self.basis));
        rows.push(row(
            format!("{}:lstd", self.prefix),
            0,
            self.dt,
            n,
            seed,
            self.truth,
            v,
            self.quad,
            &Weight::Lebesgue,
        ));
        Ok(rows)
    }
}

/// Model-free solves from independent transition pairs.
struct PairCell<'a> {
    prefix: String,
    model: DynamicsModel,
    initial: InitialSampler,
    scheme: StepScheme,
    dt: f64,
    beta: f64,
    basis: Basis,
    reward: RewardRef<'a>,
    truth: &'a dyn ValueFunction,
    quad: &'a Quadrature,
    weight: Weight,
    lstd: bool,
}

impl PairCell<'_> {
    fn rows(&self, n: usize, seed: u64) -> Result<Rows> {
        let pairs = sample_transition_pairs(&self.model, &self.initial, self.dt, n, self.scheme, seed, self.reward)?;
        let stochastic = self.model.is_stochastic();
        let mut sys = EmpiricalSystem::new(self.basis.len());
        let v = accumulate_pairs_first_order(&mut sys, &pairs, self.beta, &self.basis, stochastic)
            .and_then(|_| solve_empirical(&sys, &self.basis));
        let mut rows = vec![row(
            format!("{}:phibe_pairs", self.prefix),
            1,
            self.dt,
            n,
            seed,
            self.truth,
            v,
            self.quad,
            &self.weight,
        )];
        if self.lstd {
            let mut sys = EmpiricalSystem::new(self.basis.len());
            let v = accumulate_lstd_pairs(&mut sys, &pairs, self.beta, &self.basis)
                .and_then(|_| solve_empirical(&sys, &self.basis));
            rows.push(row(
                format!("{}:lstd", self.prefix),
                0,
                self.dt,
                n,
                seed,
                self.truth,
                v,
                self.quad,
                &self.weight,
            ));
        }
        Ok(rows)
    }
}

/// Model-based rows: exact BE solution `be` and Galerkin PhiBE of each order.
#[allow(clippy::too_many_arguments)]
fn model_based_rows<P, B>(
    prefix: &str,
    be: Result<B>,
    provider: &P,
    diffusion: bool,
    orders: &[usize],
    basis: &Basis,
    beta: f64,
    dt: f64,
    reward: RewardRef<'_>,
    truth: &dyn ValueFunction,
    aq: &Quadrature,
    eq: &Quadrature,
) -> Rows
where
    P: TransitionMomentProvider,
    B: ValueFunction,
{
    let mut rows = Vec::new();
    let be_label = format!("{prefix}:be");
    rows.push((
        be_label.clone(),
        be.and_then(|v| ErrorReport::measure(be_label, 0, dt, 0, 0, truth, &v, eq, &Weight::Lebesgue)),
    ));
    for &order in orders {
        let v = fd_coefficients(order).and_then(|c| {
            let sys = assemble_phibe(basis, provider, beta, dt, &c, aq, &Weight::Lebesgue, reward, diffusion)?;
            solve(&sys, basis)
        });
        rows.push(row(format!("{prefix}:phibe"), order, dt, 0, 0, truth, v, eq, &Weight::Lebesgue));
    }
    rows
}

fn panel_f64(ctx: &Ctx, panel: &str, key: &str) -> Result<f64> {
    ctx.params.f64(&format!("{panel}.{key}"))
}

fn panel_usize(ctx: &Ctx, panel: &str, key: &str) -> Result<usize> {
    ctx.params.usize(&format!("{panel}.{key}"))
}

fn mean_below(ctx: &mut Ctx, name: &str, advisory: bool, a: (&str, usize), b: (&str, usize), dt: f64, n: usize) {
    let ma = ctx.mean_l2(a.0, a.1, dt, n);
    let mb = ctx.mean_l2(b.0, b.1, dt, n);
    let detail = format!(
        "{}[{}] {} vs {}[{}] {}",
        a.0,
        a.1,
        ctx.describe(a.0, a.1, dt, n),
        b.0,
        b.1,
        ctx.describe(b.0, b.1, dt, n)
    );
    let ok = matches!((ma, mb), (Some(x), Some(y)) if x < y);
    ctx.check(name, advisory, ok, detail);
}

fn fig1(ctx: &mut Ctx, panel: &str) -> Result<()> {
    let lambda = ctx.params.f64("lambda")?;
    let order = ctx.params.usize("order")?;
    let points = ctx.params.usize("points")?;
    let dt = panel_f64(ctx, panel, "dt")?;
    let beta = panel_f64(ctx, panel, "beta")?;
    let k = panel_f64(ctx, panel, "k")?;
    let basis = Basis::FourierPeriodic {
        modes: panel_usize(ctx, panel, "modes")?,
    };
    let count = panel_usize(ctx, panel, "trajectories")?;
    let model = DynamicsModel::Linear1D { lambda };
    let reward = designed_reward(&model, beta, k)?;
    let truth = cos3(k);
    let (aq, eq) = quads(-PI, PI)?;

    ctx.run_once(&format!("{panel}:model"), || {
        let be = BeRollout::new(
            reward.clone(),
            move |s: &[f64]| vec![exact_linear_step_scalar(lambda, s[0], dt)],
            beta,
            dt,
            None,
        );
        Ok(model_based_rows(
            panel,
            be,
            &LinearFlowMoments { lambda },
            false,
            &[order],
            &basis,
            beta,
            dt,
            &reward,
            &truth,
            &aq,
            &eq,
        ))
    });
    ctx.check(
        format!("fig1.{panel}.phibe_below_be"),
        false,
        matches!(
            (ctx.mean_l2(&format!("{panel}:phibe"), order, dt, 0), ctx.mean_l2(&format!("{panel}:be"), 0, dt, 0)),
            (Some(p), Some(b)) if p < b
        ),
        format!(
            "model-based phibe[{order}] {} vs be {}",
            ctx.describe(&format!("{panel}:phibe"), order, dt, 0),
            ctx.describe(&format!("{panel}:be"), 0, dt, 0)
        ),
    );

    let cell = TrajectoryCell {
        prefix: panel.to_string(),
        scheme: StepScheme::default_for(&model, dt),
        model,
        dt,
        points,
        beta,
        basis,
        orders: vec![order],
        reward: &reward,
        truth: &truth,
        quad: &eq,
    };
    let label = format!("{panel}:data");
    let counts = ctx.scale_sizes(&label, &[count], ctx.reps, |c, s| cell.rows(c, s).map(|_| ()));
    ctx.run_seeds(&label, |seed| cell.rows(counts[0], seed));
    let n = counts[0] * points;
    mean_below(
        ctx,
        &format!("fig1.{panel}.phibe_mf_below_lstd"),
        panel != "a",
        (&format!("{panel}:phibe_mf"), order),
        (&format!("{panel}:lstd"), 0),
        dt,
        n,
    );
    Ok(())
}

fn fig3(ctx: &mut Ctx, panel: &str) -> Result<()> {
    let orders = ctx.params.usizes("orders")?;
    let points = ctx.params.usize("points")?;
    let euler_step = ctx.params.f64("euler_step")?;
    let dt = panel_f64(ctx, panel, "dt")?;
    let beta = panel_f64(ctx, panel, "beta")?;
    let k = panel_f64(ctx, panel, "k")?;
    let lambda = panel_f64(ctx, panel, "lambda")?;
    let basis = Basis::FourierPeriodic {
        modes: panel_usize(ctx, panel, "modes")?,
    };
    let count = panel_usize(ctx, panel, "trajectories")?;
    if !(euler_step > 0.0) {
        return Err(Error::Config("euler_step must be positive".into()));
    }
    let model = DynamicsModel::NonlinearSin1D { lambda };
    let reward = designed_reward(&model, beta, k)?;
    let truth = cos3(k);
    let (aq, eq) = quads(-PI, PI)?;

    ctx.run_once(&format!("{panel}:model"), || {
        let be = BeRollout::new(
            reward.clone(),
            move |s: &[f64]| vec![sin2_flow(lambda, s[0], dt)],
            beta,
            dt,
            None,
        );
        let flow = FlowMoments {
            dim: 1,
            flow: move |s: &[f64], t: f64| vec![sin2_flow(lambda, s[0], t)],
        };
        Ok(model_based_rows(
            panel, be, &flow, false, &orders, &basis, beta, dt, &reward, &truth, &aq, &eq,
        ))
    });
    let top = orders.iter().copied().max().unwrap_or(1);
    ctx.check(
        format!("fig3.{panel}.phibe_below_be"),
        false,
        matches!(
            (ctx.mean_l2(&format!("{panel}:phibe"), top, dt, 0), ctx.mean_l2(&format!("{panel}:be"), 0, dt, 0)),
            (Some(p), Some(b)) if p < b
        ),
        format!(
            "model-based phibe[{top}] {} vs be {}",
            ctx.describe(&format!("{panel}:phibe"), top, dt, 0),
            ctx.describe(&format!("{panel}:be"), 0, dt, 0)
        ),
    );

    let substeps = ((dt / euler_step).round() as usize).max(1);
    let cell = TrajectoryCell {
        prefix: panel.to_string(),
        model,
        scheme: StepScheme::EulerMaruyama { substeps },
        dt,
        points,
        beta,
        basis,
        orders: orders.clone(),
        reward: &reward,
        truth: &truth,
        quad: &eq,
    };
    let label = format!("{panel}:data");
    let counts = ctx.scale_sizes(&label, &[count], ctx.reps, |c, s| cell.rows(c, s).map(|_| ()));
    ctx.run_seeds(&label, |seed| cell.rows(counts[0], seed));
    let n = counts[0] * points;
    mean_below(
        ctx,
        &format!("fig3.{panel}.phibe_mf_below_lstd"),
        true,
        (&format!("{panel}:phibe_mf"), top),
        (&format!("{panel}:lstd"), 0),
        dt,
        n,
    );
    Ok(())
}

/// Model of the Fourier-basis presets: linear flow for fig4, OU for fig5.
fn sweep_model(ctx: &Ctx) -> Result<DynamicsModel> {
    let lambda = ctx.params.f64("lambda")?;
    Ok(match ctx.preset {
        Preset::Fig5 => DynamicsModel::Ou1D {
            lambda,
            sigma: ctx.params.f64("sigma")?,
        },
        _ => DynamicsModel::Linear1D { lambda },
    })
}

fn dt_sweep(ctx: &mut Ctx) -> Result<()> {
    let model = sweep_model(ctx)?;
    let beta = ctx.params.f64("beta")?;
    let k = ctx.params.f64("k")?;
    let orders = ctx.params.usizes("orders")?;
    let grid = ctx.params.f64s("dt_grid")?;
    let tol = ctx.params.f64("slope_tol")?;
    let basis = Basis::FourierPeriodic {
        modes: ctx.params.usize("modes")?,
    };
    let reward = designed_reward(&model, beta, k)?;
    let truth = cos3(k);
    let (aq, eq) = quads(-PI, PI)?;
    let tag = ctx.preset.name();

    for &dt in &grid {
        ctx.run_once(&format!("dt:model:dt={dt}"), || match model {
            DynamicsModel::Ou1D { lambda, sigma } => {
                let be = assemble_be_projection(
                    &basis,
                    &TransitionLaw::Ou { lambda, sigma },
                    beta,
                    dt,
                    &aq,
                    &Weight::Lebesgue,
                    &reward,
                )
                .and_then(|sys| solve(&sys, &basis));
                Ok(model_based_rows(
                    "dt",
                    be,
                    &OuMoments { lambda, sigma },
                    true,
                    &orders,
                    &basis,
                    beta,
                    dt,
                    &reward,
                    &truth,
                    &aq,
                    &eq,
                ))
            }
            DynamicsModel::Linear1D { lambda } => {
                let be = BeRollout::new(
                    reward.clone(),
                    move |s: &[f64]| vec![exact_linear_step_scalar(lambda, s[0], dt)],
                    beta,
                    dt,
                    None,
                );
                Ok(model_based_rows(
                    "dt",
                    be,
                    &LinearFlowMoments { lambda },
                    false,
                    &orders,
                    &basis,
                    beta,
                    dt,
                    &reward,
                    &truth,
                    &aq,
                    &eq,
                ))
            }
            _ => Err(Error::UnsupportedTransition(model.id())),
        });
    }

    let be: Vec<Option<f64>> = grid.iter().map(|&dt| ctx.mean_l2("dt:be", 0, dt, 0)).collect();
    ctx.slope_check(&format!("{tag}.dt.slope.be"), false, &grid, &be, 1.0, tol);
    for &order in &orders {
        let errs: Vec<Option<f64>> = grid.iter().map(|&dt| ctx.mean_l2("dt:phibe", order, dt, 0)).collect();
        ctx.slope_check(
            &format!("{tag}.dt.slope.phibe{order}"),
            false,
            &grid,
            &errs,
            order as f64,
            tol,
        );
    }
    if orders.contains(&2) {
        let p2: Vec<Option<f64>> = grid.iter().map(|&dt| ctx.mean_l2("dt:phibe", 2, dt, 0)).collect();
        let ok = p2.iter().zip(&be).all(|(p, b)| matches!((p, b), (Some(p), Some(b)) if p < b));
        let detail = format!(
            "phibe2 {} vs be {}",
            fmt_list(&p2.iter().map(|v| v.unwrap_or(f64::NAN)).collect::<Vec<_>>()),
            fmt_list(&be.iter().map(|v| v.unwrap_or(f64::NAN)).collect::<Vec<_>>())
        );
        ctx.check(format!("{tag}.dt.phibe2_below_be"), false, ok, detail);
    }
    Ok(())
}

fn data_sweep(ctx: &mut Ctx) -> Result<()> {
    let model = sweep_model(ctx)?;
    let beta = ctx.params.f64("beta")?;
    let k = ctx.params.f64("k")?;
    let orders = ctx.params.usizes("orders")?;
    let points = ctx.params.usize("points")?;
    let dt = ctx.params.f64("data.dt")?;
    let counts = ctx.params.usizes("data.trajectories")?;
    let basis = Basis::FourierPeriodic {
        modes: ctx.params.usize("modes")?,
    };
    let reward = designed_reward(&model, beta, k)?;
    let truth = cos3(k);
    let (_, eq) = quads(-PI, PI)?;
    let tag = ctx.preset.name();
    let cell = TrajectoryCell {
        prefix: "data".into(),
        scheme: StepScheme::default_for(&model, dt),
        model,
        dt,
        points,
        beta,
        basis,
        orders: orders.clone(),
        reward: &reward,
        truth: &truth,
        quad: &eq,
    };
    let counts = ctx.scale_sizes("data", &counts, ctx.reps, |c, s| cell.rows(c, s).map(|_| ()));
    for &c in &counts {
        ctx.run_seeds(&format!("data:J={c}"), |seed| cell.rows(c, seed));
    }
    let last = counts.iter().copied().max().unwrap_or(0) * points;
    let top = orders.iter().copied().max().unwrap_or(1);
    mean_below(
        ctx,
        &format!("{tag}.data.phibe{top}_below_lstd_at_largest_n"),
        true,
        ("data:phibe_mf", top),
        ("data:lstd", 0),
        dt,
        last,
    );
    Ok(())
}

fn fig5_budget(ctx: &mut Ctx) -> Result<()> {
    let model = sweep_model(ctx)?;
    let beta = ctx.params.f64("beta")?;
    let k = ctx.params.f64("k")?;
    let orders = ctx.params.usizes("orders")?;
    let points = ctx.params.usize("points")?;
    let samples = ctx.params.usize("budget.samples")?;
    let grid = ctx.params.f64s("budget.dt_grid")?;
    let min_seeds = ctx.params.usize("budget.min_seeds")?;
    if grid.len() < 3 {
        return Err(Error::Config("budget.dt_grid needs 3 entries".into()));
    }
    let basis = Basis::FourierPeriodic {
        modes: ctx.params.usize("modes")?,
    };
    let reward = designed_reward(&model, beta, k)?;
    let truth = cos3(k);
    let (_, eq) = quads(-PI, PI)?;
    let cells: Vec<TrajectoryCell> = grid
        .iter()
        .map(|&dt| TrajectoryCell {
            prefix: "budget".into(),
            scheme: StepScheme::default_for(&model, dt),
            model: model.clone(),
            dt,
            points,
            beta,
            basis: basis.clone(),
            orders: orders.clone(),
            reward: &reward,
            truth: &truth,
            quad: &eq,
        })
        .collect();
    let count = (samples / points.max(1)).max(1);
    let scaled = ctx.scale_sizes("budget", &[count], ctx.reps * grid.len(), |c, s| {
        cells[0].rows(c, s).map(|_| ())
    });
    let count = scaled[0];
    for cell in &cells {
        ctx.run_paired(&format!("budget:dt={}", cell.dt), "budget", |seed| cell.rows(count, seed));
    }
    let n = count * points;
    let (coarse, mid, fine) = (grid[0], grid[1], grid[2]);
    let m_coarse = ctx.mean_l2("budget:phibe_mf", 1, coarse, n);
    let m_mid = ctx.mean_l2("budget:phibe_mf", 1, mid, n);
    let m_fine = ctx.mean_l2("budget:phibe_mf", 1, fine, n);
    let fmt = |v: Option<f64>| v.map_or("missing".to_string(), |x| format!("{x:.4e}"));
    ctx.check(
        format!("fig5.budget.phibe1_dt{mid}_below_dt{coarse}"),
        false,
        matches!((m_mid, m_coarse), (Some(a), Some(b)) if a < b),
        format!(
            "mean phibe1 error dt={coarse}: {}, dt={mid}: {}, dt={fine}: {}",
            fmt(m_coarse),
            fmt(m_mid),
            fmt(m_fine)
        ),
    );
    let mid_by_seed = ctx.seed_l2("budget:phibe_mf", 1, mid, n);
    let fine_by_seed = ctx.seed_l2("budget:phibe_mf", 1, fine, n);
    let wins = mid_by_seed
        .iter()
        .filter(|(s, m)| fine_by_seed.get(s).is_some_and(|f| f > m))
        .count();
    ctx.check(
        format!("fig5.budget.phibe1_dt{fine}_above_dt{mid}"),
        true,
        wins >= min_seeds,
        format!("{wins} of {} seeds (need {min_seeds})", mid_by_seed.len()),
    );
    Ok(())
}

fn fig5_pairs(ctx: &mut Ctx) -> Result<()> {
    let lambda = ctx.params.f64("lambda")?;
    let sigma = ctx.params.f64("sigma")?;
    let beta = ctx.params.f64("beta")?;
    let k = ctx.params.f64("k")?;
    let dt = ctx.params.f64("pairs.dt")?;
    let ns = ctx.params.usizes("pairs.n")?;
    let tol = ctx.params.f64("pairs.slope_tol")?;
    let basis = Basis::FourierPeriodic {
        modes: ctx.params.usize("modes")?,
    };
    let model = DynamicsModel::Ou1D { lambda, sigma };
    let reward = designed_reward(&model, beta, k)?;
    let (aq, eq) = quads(-PI, PI)?;
    let c1 = fd_coefficients(1)?;
    let reference = assemble_phibe(
        &basis,
        &OuMoments { lambda, sigma },
        beta,
        dt,
        &c1,
        &aq,
        &Weight::Lebesgue,
        &reward,
        true,
    )
    .and_then(|sys| solve(&sys, &basis))?;
    let cell = PairCell {
        prefix: "pairs".into(),
        model,
        initial: angle_box(),
        scheme: StepScheme::Exact,
        dt,
        beta,
        basis,
        reward: &reward,
        truth: &reference,
        quad: &eq,
        weight: Weight::Lebesgue,
        lstd: false,
    };
    let ns = ctx.scale_sizes("pairs", &ns, ctx.reps, |n, s| cell.rows(n, s).map(|_| ()));
    for &n in &ns {
        ctx.run_seeds(&format!("pairs:n={n}"), |seed| cell.rows(n, seed));
    }
    let xs: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
    let errs: Vec<Option<f64>> = ns.iter().map(|&n| ctx.mean_l2("pairs:phibe_pairs", 1, dt, n)).collect();
    ctx.slope_check("fig5.pairs.sample_slope", false, &xs, &errs, -0.5, tol);
    Ok(())
}

fn lq_cases(ctx: &Ctx) -> Result<Vec<LqParams>> {
    let q = ctx.params.f64("q")?;
    let r_ctrl = ctx.params.f64("r_ctrl")?;
    let gain = ctx.params.f64("gain")?;
    Ok(ctx
        .params
        .cases(&["alpha", "b", "sigma", "beta"])?
        .into_iter()
        .map(|c| LqParams {
            q,
            r_ctrl,
            gain,
            alpha: c[0],
            b_ctrl: c[1],
            sigma: c[2],
            beta: c[3],
        })
        .collect())
}

fn case_dts(ctx: &Ctx, count: usize) -> Result<Vec<f64>> {
    let dts = ctx.params.f64s("dt")?;
    if dts.len() != count {
        return Err(Error::Config(format!("dt has {} entries, expected {count}", dts.len())));
    }
    Ok(dts)
}

fn quadratic(a1: f64, a0: f64) -> impl Fn(&[f64]) -> f64 + Send + Sync + Copy {
    move |s: &[f64]| a1 * s[0] * s[0] + a0
}

fn table1_analytic(ctx: &mut Ctx) -> Result<()> {
    let cases = lq_cases(ctx)?;
    let dts = case_dts(ctx, cases.len())?;
    let (_, eq) = quads(-1.0, 1.0)?;
    for (i, (p, &dt)) in cases.iter().zip(&dts).enumerate() {
        let c = i + 1;
        let rw = p.reward_weight();
        let lambda = p.closed_loop();
        let sols = (|| {
            let truth = lq_true_value(p)?;
            let be = lq_be_value(rw, lambda, p.sigma, p.beta, dt)?;
            let ph = lq_phibe_value(rw, lambda, p.sigma, p.beta, dt)?;
            Ok::<_, Error>((truth, be, ph))
        })();
        let ((a1, a0), (a1r, a0r), (a1p, a0p)) = match sols {
            Ok(v) => v,
            Err(e) => {
                ctx.check(format!("table1.case{c}.analytic"), false, false, e.to_string());
                continue;
            }
        };
        let truth = quadratic(a1, a0);
        ctx.run_once(&format!("analytic:case{c}"), || {
            let mut rows = Vec::new();
            for (name, v) in [("be_analytic", quadratic(a1r, a0r)), ("phibe_analytic", quadratic(a1p, a0p))] {
                let method = format!("case{c}:{name}");
                let order = usize::from(name == "phibe_analytic");
                rows.push((
                    method.clone(),
                    ErrorReport::measure(method, order, dt, 0, 0, &truth, &v, &eq, &Weight::Lebesgue),
                ));
            }
            Ok(rows)
        });
        let (rq, rc) = lq_phibe_residual(rw, lambda, p.sigma, p.beta, dt, a1p, a0p);
        ctx.check(
            format!("table1.case{c}.phibe_residual"),
            false,
            rq.abs() < 1e-12 && rc.abs() < 1e-12,
            format!("residuals ({rq:.2e}, {rc:.2e})"),
        );
        ctx.check(
            format!("table1.case{c}.phibe_closer_than_be"),
            false,
            (a1p - a1).abs() < (a1r - a1).abs(),
            format!("a1 {a1:.6} a1R {a1r:.6} a1P {a1p:.6}"),
        );
        let baseline = LqParams {
            q: 1.0,
            r_ctrl: 0.1,
            gain: 2.0,
            alpha: 0.25,
            b_ctrl: 0.25,
            sigma: 0.5,
            beta: 1.0,
        };
        if *p == baseline && dt == 0.1 {
            let expect = [(a1, 0.933333), (a1r, 1.00508), (a1p, 0.941044)];
            let ok = expect.iter().all(|(got, want)| (got - want).abs() < 1e-5);
            ctx.check(
                "table1.case1.reference_values",
                false,
                ok,
                format!("a1 {a1:.6} a1R {a1r:.6} a1P {a1p:.6}"),
            );
        }
    }
    Ok(())
}

fn table1_data(ctx: &mut Ctx) -> Result<()> {
    let cases = lq_cases(ctx)?;
    let dts = case_dts(ctx, cases.len())?;
    let n = ctx.params.usize("data.n")?;
    let min_cases = ctx.params.usize("data.min_cases")?;
    let (_, eq) = quads(-1.0, 1.0)?;
    let basis = Basis::PolynomialUpTo2 { dim: 1 };
    let mut wins = 0;
    let mut details = Vec::new();
    let units = ctx.reps * cases.len();
    let mut n_eff = n;
    for (i, (p, &dt)) in cases.iter().zip(&dts).enumerate() {
        let c = i + 1;
        let (a1, a0) = match lq_true_value(p) {
            Ok(v) => v,
            Err(e) => {
                details.push(format!("case{c}: {e}"));
                continue;
            }
        };
        let rw = p.reward_weight();
        let reward = move |s: &[f64]| rw * s[0] * s[0];
        let truth = quadratic(a1, a0);
        let cell = PairCell {
            prefix: format!("case{c}"),
            model: p.model(),
            initial: InitialSampler::UniformMesh { lo: -1.0, hi: 1.0 },
            scheme: StepScheme::Exact,
            dt,
            beta: p.beta,
            basis: basis.clone(),
            reward: &reward,
            truth: &truth,
            quad: &eq,
            weight: Weight::Lebesgue,
            lstd: true,
        };
        if i == 0 {
            n_eff = ctx.scale_sizes("data", &[n], units, |m, s| cell.rows(m, s).map(|_| ()))[0];
        }
        ctx.run_seeds(&format!("data:case{c}"), |seed| cell.rows(n_eff, seed));
        let ph = ctx.mean_l2(&format!("case{c}:phibe_pairs"), 1, dt, n_eff);
        let ls = ctx.mean_l2(&format!("case{c}:lstd"), 0, dt, n_eff);
        if matches!((ph, ls), (Some(a), Some(b)) if a < b) {
            wins += 1;
        }
        details.push(format!(
            "case{c}: phibe {} lstd {}",
            ctx.describe(&format!("case{c}:phibe_pairs"), 1, dt, n_eff),
            ctx.describe(&format!("case{c}:lstd"), 0, dt, n_eff)
        ));
    }
    ctx.check(
        "table1.data.phibe_below_lstd",
        false,
        wins >= min_cases,
        format!("{wins} of {} cases (need {min_cases}); {}", cases.len(), details.join("; ")),
    );
    Ok(())
}

fn fig8(ctx: &mut Ctx) -> Result<()> {
    let q = ctx.params.f64("q")?;
    let r_ctrl = ctx.params.f64("r_ctrl")?;
    let gain = ctx.params.f64("gain")?;
    let cases = ctx.params.cases(&["kappa", "alpha", "b", "sigma", "beta", "dt"])?;
    let n = ctx.params.usize("n")?;
    let degree = ctx.params.usize("degree")?;
    let ref_degree = ctx.params.usize("reference_degree")?;
    let euler_step = ctx.params.f64("euler_step")?;
    if !(euler_step > 0.0) {
        return Err(Error::Config("euler_step must be positive".into()));
    }
    let (aq, eq) = quads(-1.0, 1.0)?;
    let rw = q + r_ctrl * gain * gain;
    let reward = move |s: &[f64]| rw * s[0] * s[0];
    let basis = Basis::Monomial1D { degree };
    let ref_basis = Basis::Monomial1D { degree: ref_degree };
    let units = ctx.reps * cases.len();
    let mut n_eff = n;
    for (i, c) in cases.iter().enumerate() {
        let case = i + 1;
        let [kappa, alpha, b, sigma, beta, dt] = [c[0], c[1], c[2], c[3], c[4], c[5]];
        let model = DynamicsModel::CubicStabilization1D {
            kappa,
            alpha,
            b,
            gain,
            sigma,
        };
        let reference = match assemble_exact(&ref_basis, &model, beta, &aq, &Weight::Lebesgue, &reward)
            .and_then(|sys| solve(&sys, &ref_basis))
        {
            Ok(v) => v,
            Err(e) => {
                ctx.check(format!("fig8.case{case}.reference"), false, false, e.to_string());
                continue;
            }
        };
        let cell = PairCell {
            prefix: format!("case{case}"),
            model,
            initial: InitialSampler::UniformMesh { lo: -1.0, hi: 1.0 },
            scheme: StepScheme::EulerMaruyama {
                substeps: ((dt / euler_step).round() as usize).max(1),
            },
            dt,
            beta,
            basis: basis.clone(),
            reward: &reward,
            truth: &reference,
            quad: &eq,
            weight: Weight::Lebesgue,
            lstd: true,
        };
        if i == 0 {
            n_eff = ctx.scale_sizes("data", &[n], units, |m, s| cell.rows(m, s).map(|_| ()))[0];
        }
        ctx.run_seeds(&format!("data:case{case}"), |seed| cell.rows(n_eff, seed));
        mean_below(
            ctx,
            &format!("fig8.case{case}.phibe_below_lstd"),
            true,
            (&format!("case{case}:phibe_pairs"), 1),
            (&format!("case{case}:lstd"), 0),
            dt,
            n_eff,
        );
    }
    Ok(())
}

fn fig9(ctx: &mut Ctx) -> Result<()> {
    let d = ctx.params.usize("dim")?;
    let beta = ctx.params.f64("beta")?;
    let sigma = ctx.params.f64("sigma")?;
    let scale = ctx.params.f64("drift_scale")?;
    let dts = ctx.params.f64s("dt")?;
    let ns = ctx.params.usizes("n")?;
    let mc_nodes = ctx.params.usize("mc_nodes")?;
    let matrix_seed = ctx.params.u64("matrix_seed")?;
    if dts.len() != ns.len() || dts.len() < 2 {
        return Err(Error::Config("dt and n must have equal length >= 2".into()));
    }
    let spectrum: Vec<f64> = (1..=d).map(|v| v as f64).collect();
    let q = generate_orthogonal_conjugation(d, &spectrum, matrix_seed)?;
    let drift: Vec<f64> = spectrum.iter().map(|v| -scale * v).collect();
    let a = generate_orthogonal_conjugation(d, &drift, matrix_seed.wrapping_add(1))?;
    let sigma_diag = DVector::from_element(d, sigma);
    let (p_mat, c) = lq_true_value_nd(&a, &DMatrix::from_diagonal(&sigma_diag), &q, beta)?;
    let model = DynamicsModel::linear_nd(a, sigma_diag)?;
    let truth = move |s: &[f64]| {
        let v = DVector::from_column_slice(s);
        (v.transpose() * &p_mat * &v)[(0, 0)] + c
    };
    let qr = q.clone();
    let reward = move |s: &[f64]| {
        let v = DVector::from_column_slice(s);
        (v.transpose() * &qr * &v)[(0, 0)]
    };
    let lo = vec![-1.0; d];
    let hi = vec![1.0; d];
    let nodes = Quadrature::monte_carlo(&lo, &hi, mc_nodes, ctx.master ^ 0x5eed)?;
    let volume = 2f64.powi(d as i32);
    let cells: Vec<PairCell> = dts
        .iter()
        .map(|&dt| PairCell {
            prefix: "data".into(),
            model: model.clone(),
            initial: InitialSampler::UniformBox {
                lo: lo.clone(),
                hi: hi.clone(),
            },
            scheme: StepScheme::Exact,
            dt,
            beta,
            basis: Basis::PolynomialUpTo2 { dim: d },
            reward: &reward,
            truth: &truth,
            quad: &nodes,
            weight: Weight::Constant(1.0 / volume),
            lstd: true,
        })
        .collect();
    let ns = ctx.scale_sizes("data", &ns, ctx.reps, |n, s| cells[0].rows(n, s).map(|_| ()));
    for (cell, &n) in cells.iter().zip(&ns) {
        ctx.run_paired(&format!("data:dt={}", cell.dt), "data", |seed| cell.rows(n, seed));
    }
    let series = |ctx: &Ctx, method: &str, order: usize| -> Vec<Option<f64>> {
        dts.iter().zip(&ns).map(|(&dt, &n)| ctx.mean_l2(method, order, dt, n)).collect()
    };
    let ph = series(ctx, "data:phibe_pairs", 1);
    let ls = series(ctx, "data:lstd", 0);
    let show = |v: &[Option<f64>]| fmt_list(&v.iter().map(|x| x.unwrap_or(f64::NAN)).collect::<Vec<_>>());
    let decreasing = |v: &[Option<f64>]| v.windows(2).all(|w| matches!((w[0], w[1]), (Some(a), Some(b)) if b < a));
    ctx.check("fig9.phibe_decreases", false, decreasing(&ph), format!("rho-norm errors {}", show(&ph)));
    ctx.check("fig9.lstd_decreases", false, decreasing(&ls), format!("rho-norm errors {}", show(&ls)));
    for (i, &dt) in dts.iter().enumerate() {
        let ok = matches!((ph[i], ls[i]), (Some(a), Some(b)) if a <= b);
        ctx.check(
            format!("fig9.phibe_le_lstd_dt{dt}"),
            false,
            ok,
            format!("phibe {} lstd {}", ctx.describe("data:phibe_pairs", 1, dt, ns[i]), ctx.describe("data:lstd", 0, dt, ns[i])),
        );
    }
    Ok(())
}
