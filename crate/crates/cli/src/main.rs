use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use phibe::basis::Basis;
use phibe::dynamics::{sin2_flow, simulate_batch, stream_rng, DynamicsModel, InitialSampler, StepScheme};
use phibe::estimators::{FlowMoments, LinearFlowMoments, MonteCarloMoments, OuMoments, TransitionMomentProvider};
use phibe::experiments::{run_preset, ExperimentConfig};
use phibe::fdcoeff::fd_coefficients;
use phibe::galerkin::{assemble_be_projection, assemble_phibe, designed_reward, solve, TransitionLaw, ValueApprox};
use phibe::io::{
    parse_basis_spec, parse_model_spec, parse_pairs_csv, parse_trajectories_csv, trajectories_to_csv, values_to_csv,
};
use phibe::modelfree::{
    accumulate_lstd, accumulate_lstd_pairs, accumulate_pairs_first_order, accumulate_phibe, solve_empirical,
    EmpiricalSystem, Rewards,
};
use phibe::quadrature::{Quadrature, Weight};

type Reward = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Quadrature nodes used to assemble model-based systems.
const ASSEMBLY_NODES: usize = 400;

#[derive(Parser)]
#[command(name = "phibe", version, about = "Continuous-time policy evaluation from discrete-time data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference weights of order i and their moment residuals.
    Coeffs {
        #[arg(long)]
        order: usize,
    },
    /// Simulate trajectories to CSV.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        dt: f64,
        /// Stored states per trajectory.
        #[arg(long)]
        m: usize,
        #[arg(long = "n-traj")]
        n_traj: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Initial states uniform on [lo, hi] per coordinate.
        #[arg(long, value_parser = parse_interval)]
        init: Option<(f64, f64)>,
        /// Euler-Maruyama internal step; exact transitions are used when omitted and available.
        #[arg(long)]
        euler_step: Option<f64>,
        /// Adds a reward column from the designed reward for cos^3(k s) (needs --beta).
        #[arg(long, requires = "beta")]
        reward_k: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Model-based Galerkin solve for a one-dimensional model.
    SolveGalerkin {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        basis: String,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        dt: f64,
        #[arg(long, value_enum)]
        mode: Mode,
        /// The reward makes cos^3(k s) the exact value function.
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        #[arg(long, value_parser = parse_interval)]
        domain: Option<(f64, f64)>,
        #[arg(long, default_value_t = 201)]
        grid: usize,
        /// Paths per node for Monte Carlo moments of models without closed forms.
        #[arg(long, default_value_t = 1000)]
        mc_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Data-driven solve from trajectory or pair CSV.
    SolveModelfree {
        #[arg(long, value_enum)]
        algo: Algo,
        #[arg(long, default_value_t = 1)]
        order: usize,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        basis: String,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        dt: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Model used for the reward when the data has no reward column.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value = "")]
        params: String,
        #[arg(long, default_value_t = 1.0)]
        k: f64,
        /// Drop the second-order term for pair data.
        #[arg(long)]
        drift_only: bool,
        #[arg(long, default_value_t = 201)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named experiment preset.
    Experiment {
        #[arg(long, required_unless_present = "config")]
        preset: Option<String>,
        /// JSON file mirroring the experiment configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct ModelArgs {
    /// linear1d, nonlinear_sin1d, ou1d, cubic1d or linear_nd.
    #[arg(long)]
    model: String,
    /// `key=value,...` or a JSON object.
    #[arg(long, default_value = "")]
    params: String,
}

impl ModelArgs {
    fn build(&self) -> Result<DynamicsModel> {
        Ok(parse_model_spec(&self.model, &self.params)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Phibe,
    Be,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Algo {
    PhibeDet,
    PhibeStoch,
    PhibePairs,
    Lstd,
}

fn parse_interval(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = a.trim().parse().map_err(|_| format!("invalid number {a:?}"))?;
    let hi: f64 = b.trim().parse().map_err(|_| format!("invalid number {b:?}"))?;
    if !(lo < hi) {
        return Err("need lo < hi".into());
    }
    Ok((lo, hi))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns false when an experiment check fails.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Coeffs { order } => {
            print!("{}", coeffs_csv(order)?);
            Ok(true)
        }
        Command::Simulate {
            model,
            dt,
            m,
            n_traj,
            seed,
            init,
            euler_step,
            reward_k,
            beta,
            out,
        } => {
            let model = model.build()?;
            if m < 2 {
                bail!("--m must be at least 2 stored states");
            }
            let d = model.dim();
            let (lo, hi) = init.unwrap_or((-PI, PI));
            let initial = InitialSampler::UniformBox {
                lo: vec![lo; d],
                hi: vec![hi; d],
            };
            let scheme = match euler_step {
                Some(h) if h > 0.0 => StepScheme::EulerMaruyama {
                    substeps: ((dt / h).round() as usize).max(1),
                },
                Some(h) => bail!("--euler-step must be positive, got {h}"),
                None => StepScheme::default_for(&model, dt),
            };
            let trajs = simulate_batch(&model, &initial, dt, m - 1, n_traj, scheme, seed)?;
            let rewards = match (reward_k, beta) {
                (Some(k), Some(beta)) => {
                    let r = designed_reward(&model, beta, k)?;
                    Some(trajs.iter().map(|t| t.states().map(&r).collect()).collect::<Vec<Vec<f64>>>())
                }
                _ => None,
            };
            write(&out, &trajectories_to_csv(&trajs, rewards.as_deref())?)?;
            Ok(true)
        }
        Command::SolveGalerkin {
            model,
            basis,
            order,
            beta,
            dt,
            mode,
            k,
            domain,
            grid,
            mc_samples,
            seed,
            out,
        } => {
            let spec = model.build()?;
            let basis = parse_basis_spec(&basis)?;
            let (lo, hi) = domain.unwrap_or_else(|| default_domain(&basis));
            let v = solve_galerkin(&spec, &basis, order, beta, dt, mode, k, (lo, hi), mc_samples, seed)?;
            write_solution(
                &out,
                &v,
                &grid_points(lo, hi, grid)?,
                json!({
                    "command": "solve-galerkin",
                    "mode": match mode { Mode::Phibe => "phibe", Mode::Be => "be" },
                    "model": spec,
                    "order": order,
                    "beta": beta,
                    "dt": dt,
                    "k": k,
                    "domain": [lo, hi],
                    "seed": seed,
                }),
            )?;
            Ok(true)
        }
        Command::SolveModelfree {
            algo,
            order,
            data,
            basis,
            beta,
            dt,
            seed,
            model,
            params,
            k,
            drift_only,
            grid,
            out,
        } => {
            let basis = parse_basis_spec(&basis)?;
            let text = fs::read_to_string(&data).with_context(|| format!("reading {}", data.display()))?;
            let reward = match &model {
                Some(kind) => Some(designed_reward_arc(&parse_model_spec(kind, &params)?, beta, k)?),
                None => None,
            };
            let (v, points) = solve_modelfree(algo, order, &text, &basis, beta, dt, reward, drift_only, grid)?;
            write_solution(
                &out,
                &v,
                &points,
                json!({
                    "command": "solve-modelfree",
                    "algo": algo.to_possible_value().map(|p| p.get_name().to_string()),
                    "order": order,
                    "beta": beta,
                    "dt": dt,
                    "data": data.display().to_string(),
                    "seed": seed,
                }),
            )?;
            Ok(true)
        }
        Command::Experiment {
            preset,
            config,
            set,
            out,
        } => {
            let mut cfg = match &config {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    let mut cfg = ExperimentConfig::from_json(&text)?;
                    if let Some(p) = preset {
                        cfg.preset = p;
                    }
                    cfg
                }
                None => ExperimentConfig::new(preset.context("--preset is required")?),
            };
            for s in &set {
                cfg.set(s)?;
            }
            let dir = match out.or_else(|| cfg.out.as_ref().map(PathBuf::from)) {
                Some(d) => d,
                None => bail!("--out is required"),
            };
            let outcome = run_preset(&cfg)?;
            outcome.write(&dir)?;
            print!("{}", outcome.summary_text());
            Ok(outcome.passed())
        }
    }
}

fn coeffs_csv(order: usize) -> Result<String> {
    let c = fd_coefficients(order)?;
    let mut s = String::from("j,a_j\n");
    for (j, a) in c.weights().iter().enumerate() {
        s.push_str(&format!("{j},{a}\n"));
    }
    s.push_str("k,residual\n");
    for (k, r) in c.moment_residuals().iter().enumerate() {
        s.push_str(&format!("{k},{r}\n"));
    }
    Ok(s)
}

fn default_domain(basis: &Basis) -> (f64, f64) {
    match basis {
        Basis::FourierPeriodic { .. } => (-PI, PI),
        _ => (-1.0, 1.0),
    }
}

fn grid_points(lo: f64, hi: f64, n: usize) -> Result<Vec<Vec<f64>>> {
    if n < 2 {
        bail!("--grid must be at least 2");
    }
    Ok((0..n)
        .map(|i| vec![lo + (hi - lo) * i as f64 / (n - 1) as f64])
        .collect())
}

fn designed_reward_arc(model: &DynamicsModel, beta: f64, k: f64) -> Result<Reward> {
    Ok(Arc::new(designed_reward(model, beta, k)?))
}

/// Deterministic one-step map for models without noise.
fn step_map(model: &DynamicsModel, dt: f64) -> Result<Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>> {
    if model.is_stochastic() {
        bail!("no one-step law available for {}", model.id());
    }
    Ok(match *model {
        DynamicsModel::NonlinearSin1D { lambda } => Arc::new(move |s: &[f64]| vec![sin2_flow(lambda, s[0], dt)]),
        _ => {
            let model = model.clone();
            let substeps = ((dt / 1e-4).round() as usize).max(1);
            Arc::new(move |s: &[f64]| {
                let mut rng = stream_rng(0, 0);
                model
                    .euler_maruyama(s, dt, substeps, &mut rng)
                    .unwrap_or_else(|_| vec![f64::NAN; s.len()])
            })
        }
    })
}

#[allow(clippy::too_many_arguments)]
fn solve_galerkin(
    model: &DynamicsModel,
    basis: &Basis,
    order: usize,
    beta: f64,
    dt: f64,
    mode: Mode,
    k: f64,
    (lo, hi): (f64, f64),
    mc_samples: usize,
    seed: u64,
) -> Result<ValueApprox> {
    if model.dim() != 1 || basis.dim() != 1 {
        bail!("solve-galerkin supports one-dimensional models and bases");
    }
    let reward = designed_reward(model, beta, k)?;
    let quad = Quadrature::gauss_legendre(lo, hi, ASSEMBLY_NODES)?;
    let weight = Weight::Constant(1.0 / (hi - lo));
    let system = match mode {
        Mode::Be => {
            let law = match TransitionLaw::for_model(model) {
                Ok(law) => law,
                Err(_) => TransitionLaw::Map(step_map(model, dt)?),
            };
            assemble_be_projection(basis, &law, beta, dt, &quad, &weight, &reward)?
        }
        Mode::Phibe => {
            let coeffs = fd_coefficients(order)?;
            let provider: Box<dyn TransitionMomentProvider> = match *model {
                DynamicsModel::Linear1D { lambda } => Box::new(LinearFlowMoments { lambda }),
                DynamicsModel::Ou1D { lambda, sigma } => Box::new(OuMoments { lambda, sigma }),
                DynamicsModel::NonlinearSin1D { lambda } => Box::new(FlowMoments {
                    dim: 1,
                    flow: move |s: &[f64], t: f64| vec![sin2_flow(lambda, s[0], t)],
                }),
                _ => Box::new(MonteCarloMoments {
                    model: model.clone(),
                    samples: mc_samples,
                    internal_step: if model.is_stochastic() { 1e-3 } else { 1e-4 },
                    seed,
                }),
            };
            assemble_phibe(
                basis,
                provider.as_ref(),
                beta,
                dt,
                &coeffs,
                &quad,
                &weight,
                &reward,
                model.is_stochastic(),
            )?
        }
    };
    Ok(solve(&system, basis)?)
}

#[allow(clippy::too_many_arguments)]
fn solve_modelfree(
    algo: Algo,
    order: usize,
    text: &str,
    basis: &Basis,
    beta: f64,
    dt: f64,
    reward: Option<Reward>,
    drift_only: bool,
    grid: usize,
) -> Result<(ValueApprox, Vec<Vec<f64>>)> {
    let pairs_format = text.lines().next().is_some_and(|h| !h.trim_start().starts_with("traj_id"));
    let mut sys = EmpiricalSystem::new(basis.len());
    let starts: Vec<Vec<f64>>;
    if algo == Algo::PhibePairs || (algo == Algo::Lstd && pairs_format) {
        let data = parse_pairs_csv(text)?;
        let pairs = data.into_pairs(dt, reward.as_ref().map(|r| r.as_ref() as &dyn Fn(&[f64]) -> f64))?;
        if algo == Algo::Lstd {
            accumulate_lstd_pairs(&mut sys, &pairs, beta, basis)?;
        } else {
            accumulate_pairs_first_order(&mut sys, &pairs, beta, basis, !drift_only)?;
        }
        starts = (0..pairs.len()).map(|i| pairs.start(i).to_vec()).collect();
    } else {
        let data = parse_trajectories_csv(text, dt)?;
        let func;
        let rewards = match (&data.rewards, &reward) {
            (Some(obs), _) => Rewards::Observed(obs),
            (None, Some(r)) => {
                func = r.clone();
                Rewards::Function(func.as_ref())
            }
            (None, None) => bail!("data has no reward column; pass --model and --params for the designed reward"),
        };
        match algo {
            Algo::Lstd => accumulate_lstd(&mut sys, &data.trajectories, rewards, beta, basis)?,
            _ => {
                let coeffs = fd_coefficients(order)?;
                let stochastic = algo == Algo::PhibeStoch;
                accumulate_phibe(&mut sys, &data.trajectories, rewards, beta, &coeffs, basis, stochastic)?
            }
        }
        starts = data
            .trajectories
            .iter()
            .flat_map(|t| t.states().map(<[f64]>::to_vec))
            .collect();
    }
    let v = solve_empirical(&sys, basis)?;
    let points = if basis.dim() == 1 {
        let lo = starts.iter().map(|s| s[0]).fold(f64::INFINITY, f64::min);
        let hi = starts.iter().map(|s| s[0]).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            grid_points(lo, hi, grid)?
        } else {
            vec![vec![lo]]
        }
    } else {
        starts.into_iter().take(grid).collect()
    };
    Ok((v, points))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Values on `points` to `out`, and `theta` with diagnostics to the `.json` sidecar.
fn write_solution(out: &Path, v: &ValueApprox, points: &[Vec<f64>], mut meta: Value) -> Result<()> {
    let rows: Vec<(&[f64], f64)> = points.iter().map(|s| (s.as_slice(), v.value(s))).collect();
    write(out, &values_to_csv(v.basis.dim(), rows.into_iter()))?;
    meta["basis"] = json!(v.basis.name());
    meta["theta"] = json!(v.theta.iter().collect::<Vec<_>>());
    meta["residual"] = json!(v.diagnostics.residual);
    meta["condition"] = json!(v.diagnostics.condition);
    meta["count"] = json!(v.diagnostics.count);
    write(&out.with_extension("json"), &serde_json::to_string_pretty(&meta)?)
}
