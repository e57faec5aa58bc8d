//! CSV readers and writers for trajectories, transition pairs and value tables.
//!
//! Trajectories: `traj_id,step,s_0,...,s_{d-1}[,reward]`, rows of one trajectory
//! contiguous with steps `0, 1, 2, ...`. Pairs: `s_0,...,s_{d-1},next_0,...,next_{d-1}[,reward]`.

use std::fmt::Write as _;

use csv::{ReaderBuilder, StringRecord, Trim};

use nalgebra::{DMatrix, DVector};
use serde_json::{Map, Value};

use crate::basis::Basis;
use crate::dynamics::{DynamicsModel, Trajectory, TransitionPairs};
use crate::error::{Error, Result};

/// Parsed trajectories plus the optional per-state reward column.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryData {
    pub trajectories: Vec<Trajectory>,
    pub rewards: Option<Vec<Vec<f64>>>,
}

/// Parsed transition pairs before `dt` is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub dim: usize,
    pub starts: Vec<f64>,
    pub ends: Vec<f64>,
    pub rewards: Option<Vec<f64>>,
}

impl PairData {
    pub fn len(&self) -> usize {
        self.starts.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Attaches `dt`. Rewards come from the file, else from `reward` at each start state.
    pub fn into_pairs(self, dt: f64, reward: Option<&dyn Fn(&[f64]) -> f64>) -> Result<TransitionPairs> {
        let rewards = match (self.rewards, reward) {
            (Some(r), _) => r,
            (None, Some(f)) => self.starts.chunks_exact(self.dim).map(f).collect(),
            (None, None) => {
                return Err(Error::InvalidParameter(
                    "pairs carry no reward column and no reward function was given".into(),
                ))
            }
        };
        TransitionPairs::new(self.starts, self.ends, self.dim, dt, rewards)
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    ReaderBuilder::new()
        .trim(Trim::All)
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes())
}

fn headers(rdr: &mut csv::Reader<&[u8]>) -> Result<Vec<String>> {
    let h = rdr.headers().map_err(|e| parse_err(1, e.to_string()))?;
    Ok(h.iter().map(str::to_string).collect())
}

/// Checks that `cols` is exactly `{prefix}0, {prefix}1, ...` and returns its length.
fn indexed_columns(cols: &[String], prefix: &str) -> Result<usize> {
    for (i, c) in cols.iter().enumerate() {
        if *c != format!("{prefix}{i}") {
            return Err(parse_err(1, format!("expected column {prefix}{i}, found {c:?}")));
        }
    }
    if cols.is_empty() {
        return Err(parse_err(1, format!("no {prefix}* columns")));
    }
    Ok(cols.len())
}

fn line_of(rec: &StringRecord, fallback: usize) -> usize {
    rec.position().map_or(fallback, |p| p.line() as usize)
}

fn field<T: std::str::FromStr>(rec: &StringRecord, i: usize, line: usize, what: &str) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    raw.parse()
        .map_err(|_| parse_err(line, format!("invalid {what} {raw:?}")))
}

fn finite(rec: &StringRecord, i: usize, line: usize, what: &str) -> Result<f64> {
    let v: f64 = field(rec, i, line, what)?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite {what}")));
    }
    Ok(v)
}

pub fn parse_trajectories_csv(text: &str, dt: f64) -> Result<TrajectoryData> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    let mut rdr = reader(text);
    let cols = headers(&mut rdr)?;
    if cols.len() < 3 || cols[0] != "traj_id" || cols[1] != "step" {
        return Err(parse_err(1, "header must start with traj_id,step"));
    }
    let has_reward = cols.last().is_some_and(|c| c == "reward");
    let state_end = cols.len() - usize::from(has_reward);
    let d = indexed_columns(&cols[2..state_end], "s_")?;

    let mut trajectories = Vec::new();
    let mut rewards: Vec<Vec<f64>> = Vec::new();
    let mut current: Option<(u64, Vec<f64>, Vec<f64>)> = None;
    let mut seen = std::collections::HashSet::new();
    let finish = |cur: (u64, Vec<f64>, Vec<f64>), trajs: &mut Vec<Trajectory>, rews: &mut Vec<Vec<f64>>, line: usize| {
        let (id, states, r) = cur;
        if states.len() < 2 * d {
            return Err(parse_err(line, format!("trajectory {id} has fewer than 2 states")));
        }
        trajs.push(Trajectory::new(states, d, dt, id, "csv")?);
        rews.push(r);
        Ok(())
    };
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(k + 2, e.to_string()))?;
        let line = line_of(&rec, k + 2);
        let id: u64 = field(&rec, 0, line, "traj_id")?;
        let step: usize = field(&rec, 1, line, "step")?;
        if current.as_ref().is_some_and(|(cid, _, _)| *cid != id) {
            let done = current.take().expect("checked above");
            finish(done, &mut trajectories, &mut rewards, line)?;
        }
        if current.is_none() {
            if !seen.insert(id) {
                return Err(parse_err(line, format!("rows of trajectory {id} are not contiguous")));
            }
            current = Some((id, Vec::new(), Vec::new()));
        }
        let (_, states, r) = current.as_mut().expect("set above");
        if step != states.len() / d {
            return Err(parse_err(
                line,
                format!("trajectory {id}: expected step {}, found {step}", states.len() / d),
            ));
        }
        for i in 0..d {
            states.push(finite(&rec, 2 + i, line, "state")?);
        }
        if has_reward {
            r.push(finite(&rec, state_end, line, "reward")?);
        }
    }
    if let Some(done) = current.take() {
        finish(done, &mut trajectories, &mut rewards, usize::MAX)?;
    }
    if trajectories.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }
    Ok(TrajectoryData {
        trajectories,
        rewards: has_reward.then_some(rewards),
    })
}

pub fn parse_pairs_csv(text: &str) -> Result<PairData> {
    let mut rdr = reader(text);
    let cols = headers(&mut rdr)?;
    let has_reward = cols.last().is_some_and(|c| c == "reward");
    let body = &cols[..cols.len() - usize::from(has_reward)];
    if body.len() % 2 != 0 || body.is_empty() {
        return Err(parse_err(1, "header must list s_* then next_* columns"));
    }
    let d = body.len() / 2;
    indexed_columns(&body[..d], "s_")?;
    indexed_columns(&body[d..], "next_")?;
    let mut starts = Vec::new();
    let mut ends = Vec::new();
    let mut rewards = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(k + 2, e.to_string()))?;
        let line = line_of(&rec, k + 2);
        for i in 0..d {
            starts.push(finite(&rec, i, line, "state")?);
        }
        for i in 0..d {
            ends.push(finite(&rec, d + i, line, "next state")?);
        }
        if has_reward {
            rewards.push(finite(&rec, 2 * d, line, "reward")?);
        }
    }
    if starts.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }
    Ok(PairData {
        dim: d,
        starts,
        ends,
        rewards: has_reward.then_some(rewards),
    })
}

fn state_header(out: &mut String, prefix: &str, d: usize) {
    for i in 0..d {
        if !out.is_empty() && !out.ends_with('\n') {
            out.push(',');
        }
        let _ = write!(out, "{prefix}{i}");
    }
}

/// Writes trajectories in the layout read by [`parse_trajectories_csv`]; the
/// `traj_id` column is the trajectory's position in the slice.
pub fn trajectories_to_csv(trajectories: &[Trajectory], rewards: Option<&[Vec<f64>]>) -> Result<String> {
    let d = trajectories.first().map_or(1, Trajectory::dim);
    if let Some(r) = rewards {
        if r.len() != trajectories.len() || r.iter().zip(trajectories).any(|(r, t)| r.len() != t.len()) {
            return Err(Error::MisalignedRewards {
                trajectory: 0,
                expected: trajectories.len(),
                got: r.len(),
            });
        }
    }
    let mut out = String::from("traj_id,step");
    state_header(&mut out, "s_", d);
    if rewards.is_some() {
        out.push_str(",reward");
    }
    out.push('\n');
    for (l, t) in trajectories.iter().enumerate() {
        if t.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: t.dim(),
            });
        }
        for (j, s) in t.states().enumerate() {
            let _ = write!(out, "{l},{j}");
            for v in s {
                let _ = write!(out, ",{v}");
            }
            if let Some(r) = rewards {
                let _ = write!(out, ",{}", r[l][j]);
            }
            out.push('\n');
        }
    }
    Ok(out)
}

pub fn pairs_to_csv(pairs: &TransitionPairs) -> String {
    let d = pairs.dim();
    let mut out = String::new();
    state_header(&mut out, "s_", d);
    state_header(&mut out, "next_", d);
    out.push_str(",reward\n");
    for i in 0..pairs.len() {
        let vals = pairs.start(i).iter().chain(pairs.end(i)).chain(std::iter::once(&pairs.rewards[i]));
        let row: Vec<String> = vals.map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `s_0,...,s_{d-1},value` rows.
pub fn values_to_csv<'a>(dim: usize, rows: impl IntoIterator<Item = (&'a [f64], f64)>) -> String {
    let mut out = String::new();
    state_header(&mut out, "s_", dim);
    out.push_str(",value\n");
    for (s, v) in rows {
        for x in s {
            let _ = write!(out, "{x},");
        }
        let _ = writeln!(out, "{v}");
    }
    out
}

/// Model from a kind name (`linear1d`, `nonlinear_sin1d`, `ou1d`, `cubic1d`, `linear_nd`)
/// and parameters, given either as a JSON object or as `key=value` pairs separated
/// by commas. `linear_nd` takes `a` as nested rows and `sigma_diag` as a list.
pub fn parse_model_spec(kind: &str, params: &str) -> Result<DynamicsModel> {
    let params = params.trim();
    let mut map: Map<String, Value> = if params.starts_with('{') {
        serde_json::from_str(params).map_err(|e| Error::Config(format!("model params: {e}")))?
    } else {
        let mut m = Map::new();
        for part in params.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = crate::experiments::parse_set(part)?;
            m.insert(k, v);
        }
        m
    };
    let kind = kind.trim();
    let model = if kind == "linear_nd" {
        let rows: Vec<Vec<f64>> = take(&mut map, "a")?;
        let sigma: Vec<f64> = take(&mut map, "sigma_diag")?;
        if let Some(k) = map.keys().next() {
            return Err(Error::Config(format!("unknown parameter {k:?} for linear_nd")));
        }
        let d = rows.len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Config("a must be a nonempty square matrix".into()));
        }
        let a = DMatrix::from_fn(d, d, |i, j| rows[i][j]);
        DynamicsModel::linear_nd(a, DVector::from_vec(sigma))?
    } else {
        map.insert("kind".into(), Value::String(kind.to_string()));
        serde_json::from_value(Value::Object(map)).map_err(|e| Error::Config(format!("model {kind:?}: {e}")))?
    };
    model.validate()?;
    Ok(model)
}

fn take<T: serde::de::DeserializeOwned>(map: &mut Map<String, Value>, key: &str) -> Result<T> {
    let v = map
        .remove(key)
        .ok_or_else(|| Error::Config(format!("missing parameter {key:?}")))?;
    serde_json::from_value(v).map_err(|e| Error::Config(format!("{key}: {e}")))
}

/// `fourier:M`, `poly2:D` or `monomial:N`.
pub fn parse_basis_spec(spec: &str) -> Result<Basis> {
    let (name, size) = spec
        .trim()
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("basis spec {spec:?} must look like name:size")))?;
    let size: usize = size
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid basis size in {spec:?}")))?;
    let basis = match name.trim() {
        "fourier" => Basis::FourierPeriodic { modes: size },
        "poly2" if size >= 1 => Basis::PolynomialUpTo2 { dim: size },
        "monomial" => Basis::Monomial1D { degree: size },
        other => return Err(Error::Config(format!("unknown basis {other:?} (size {size})"))),
    };
    if basis.len() > 10_000 {
        return Err(Error::Config(format!("basis {spec:?} is too large")));
    }
    Ok(basis)
}
