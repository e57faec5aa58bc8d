//! Named, config-driven experiment presets with CSV/JSON artifacts and pass/fail checks.

mod presets;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::metrics::{fit_order, seed_summary, ErrorReport};

/// A preset name plus `key -> value` overrides of its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
    #[serde(default)]
    pub out: Option<String>,
}

impl ExperimentConfig {
    pub fn new(preset: impl Into<String>) -> Self {
        ExperimentConfig {
            preset: preset.into(),
            overrides: BTreeMap::new(),
            out: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn with(mut self, key: &str, value: Value) -> Self {
        self.overrides.insert(key.to_string(), value);
        self
    }

    /// Applies a `key=value` assignment; see [`parse_set`].
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = parse_set(assignment)?;
        self.overrides.insert(k, v);
        Ok(())
    }

    /// Preset plus fully merged, type-checked parameters.
    pub fn resolve(&self) -> Result<(Preset, Params)> {
        let preset: Preset = self.preset.parse()?;
        let params = Params::merge(preset.defaults(), &self.overrides)?;
        let known = preset.panels();
        for p in params.strings("panels")? {
            if !known.contains(&p.as_str()) {
                return Err(Error::Config(format!(
                    "unknown panel {p:?} for {preset}; expected one of {known:?}"
                )));
            }
        }
        if params.usize("seeds")? < 2 {
            return Err(Error::Config("seeds must be >= 2".into()));
        }
        Ok((preset, params))
    }
}

/// Splits `key=value`. The value is read as JSON when it parses, otherwise as a string.
pub fn parse_set(assignment: &str) -> Result<(String, Value)> {
    let (k, v) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
    let k = k.trim();
    if k.is_empty() || k.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Config(format!("invalid key {k:?}")));
    }
    let v = v.trim();
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Fig1,
    Fig3,
    Fig4,
    Fig5,
    Table1,
    Fig8,
    Fig9,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Fig1,
        Preset::Fig3,
        Preset::Fig4,
        Preset::Fig5,
        Preset::Table1,
        Preset::Fig8,
        Preset::Fig9,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Fig1 => "fig1",
            Preset::Fig3 => "fig3",
            Preset::Fig4 => "fig4",
            Preset::Fig5 => "fig5",
            Preset::Table1 => "table1",
            Preset::Fig8 => "fig8",
            Preset::Fig9 => "fig9",
        }
    }

    pub fn panels(&self) -> &'static [&'static str] {
        presets::panels(*self)
    }

    /// Default parameters, including the shared `seed`, `seeds`, `budget_secs`, `panels`.
    pub fn defaults(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("seed".into(), Value::from(0u64));
        m.insert("seeds".into(), Value::from(20u64));
        m.insert("budget_secs".into(), Value::from(900.0));
        m.insert("panels".into(), Value::from(self.panels().to_vec()));
        m.extend(presets::defaults(*self));
        m
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let p = match s.trim().to_ascii_lowercase().as_str() {
            "fig1" => Preset::Fig1,
            "fig3" => Preset::Fig3,
            "fig4" => Preset::Fig4,
            "fig5" => Preset::Fig5,
            "table1" | "fig6" | "fig7" | "fig6-7" | "fig6-7/table1" => Preset::Table1,
            "fig8" => Preset::Fig8,
            "fig9" => Preset::Fig9,
            other => {
                let names: Vec<_> = Preset::ALL.iter().map(|p| p.name()).collect();
                return Err(Error::Config(format!("unknown preset {other:?}; expected one of {names:?}")));
            }
        };
        Ok(p)
    }
}

/// Resolved preset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params(pub BTreeMap<String, Value>);

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    UInt,
    Float,
    Bool,
    Str,
}

fn kind_of(v: &Value) -> Option<Kind> {
    match v {
        Value::Number(n) if n.is_u64() => Some(Kind::UInt),
        Value::Number(_) => Some(Kind::Float),
        Value::Bool(_) => Some(Kind::Bool),
        Value::String(_) => Some(Kind::Str),
        _ => None,
    }
}

fn fits(expected: Kind, v: &Value) -> bool {
    match (expected, v) {
        (Kind::UInt, Value::Number(n)) => n.is_u64(),
        (Kind::UInt, Value::String(_)) => false,
        (Kind::Float, Value::Number(n)) => n.as_f64().is_some_and(f64::is_finite),
        (Kind::Bool, Value::Bool(_)) => true,
        (Kind::Str, Value::String(_)) => true,
        _ => false,
    }
}

impl Params {
    fn merge(defaults: Map<String, Value>, overrides: &BTreeMap<String, Value>) -> Result<Params> {
        let mut out: BTreeMap<String, Value> = defaults.into_iter().collect();
        for (key, value) in overrides {
            let default = out
                .get(key)
                .ok_or_else(|| Error::Config(format!("unknown parameter {key:?}")))?;
            let ok = match default {
                Value::Array(items) => {
                    let kind = items.first().and_then(kind_of);
                    match (value, kind) {
                        (Value::Array(vs), Some(k)) => !vs.is_empty() && vs.iter().all(|v| fits(k, v)),
                        _ => false,
                    }
                }
                d => kind_of(d).is_some_and(|k| fits(k, value)),
            };
            if !ok {
                return Err(Error::Config(format!(
                    "parameter {key:?}: {value} does not match the type of default {default}"
                )));
            }
            out.insert(key.clone(), value.clone());
        }
        Ok(Params(out))
    }

    fn get(&self, key: &str) -> Result<&Value> {
        self.0
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing parameter {key:?}")))
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.get(key)?
            .as_f64()
            .ok_or_else(|| Error::Config(format!("{key} is not a number")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.get(key)?
            .as_u64()
            .ok_or_else(|| Error::Config(format!("{key} is not a nonnegative integer")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.u64(key)? as usize)
    }

    pub fn f64s(&self, key: &str) -> Result<Vec<f64>> {
        self.array(key, |v| v.as_f64())
    }

    pub fn usizes(&self, key: &str) -> Result<Vec<usize>> {
        self.array(key, |v| v.as_u64().map(|x| x as usize))
    }

    pub fn strings(&self, key: &str) -> Result<Vec<String>> {
        self.array(key, |v| v.as_str().map(str::to_string))
    }

    fn array<T>(&self, key: &str, f: impl Fn(&Value) -> Option<T>) -> Result<Vec<T>> {
        match self.get(key)? {
            Value::Array(vs) => vs
                .iter()
                .map(|v| f(v).ok_or_else(|| Error::Config(format!("bad element in {key}"))))
                .collect(),
            _ => Err(Error::Config(format!("{key} is not an array"))),
        }
    }

    /// Same-length numeric arrays, as one row per case.
    pub fn cases(&self, keys: &[&str]) -> Result<Vec<Vec<f64>>> {
        let cols: Vec<Vec<f64>> = keys.iter().map(|k| self.f64s(k)).collect::<Result<_>>()?;
        let n = cols[0].len();
        if let Some((k, c)) = keys.iter().zip(&cols).find(|(_, c)| c.len() != n) {
            return Err(Error::Config(format!("{k} has {} entries, expected {n}", c.len())));
        }
        Ok((0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub advisory: bool,
    pub detail: String,
}

/// A cell whose solve or simulation failed; the preset continues without it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    pub preset: Preset,
    pub params: Params,
    pub reports: Vec<ErrorReport>,
    pub checks: Vec<Check>,
    pub failures: Vec<CellFailure>,
    /// Sample-size factors applied by the budget guard, per cell label.
    pub scale_factors: BTreeMap<String, f64>,
    /// Seeds used per cell label.
    pub seeds: BTreeMap<String, Vec<u64>>,
    pub elapsed_secs: f64,
}

impl ExperimentOutcome {
    /// True iff every non-advisory check passed.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.advisory || c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn errors_csv(&self) -> String {
        let mut out = String::from(ErrorReport::CSV_HEADER);
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut out = format!("preset {}\n", self.preset);
        for c in &self.checks {
            let tag = match (c.passed, c.advisory) {
                (true, false) => "PASS",
                (false, false) => "FAIL",
                (true, true) => "PASS (advisory)",
                (false, true) => "FAIL (advisory)",
            };
            out.push_str(&format!("{tag} {}: {}\n", c.name, c.detail));
        }
        for (label, f) in &self.scale_factors {
            out.push_str(&format!("budget guard scaled {label} by {f:.4}\n"));
        }
        if !self.failures.is_empty() {
            out.push_str(&format!("partial results: {} failed cells\n", self.failures.len()));
            for f in &self.failures {
                out.push_str(&format!("  {} seed {}: {}\n", f.cell, f.seed, f.error));
            }
        }
        out.push_str(&format!(
            "overall: {}\n",
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }

    pub fn manifest(&self) -> Value {
        serde_json::json!({
            "preset": self.preset.name(),
            "config": self.params,
            "seeds": self.seeds,
            "scale_factors": self.scale_factors,
            "failures": self.failures,
            "checks": self.checks,
            "git_describe": git_describe(),
            "crate_version": env!("CARGO_PKG_VERSION"),
            "elapsed_secs": self.elapsed_secs,
        })
    }

    /// Writes `errors.csv`, `manifest.json` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("errors.csv"), self.errors_csv())?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::Io(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), manifest + "\n")?;
        std::fs::write(dir.join("summary.txt"), self.summary_text())?;
        Ok(())
    }

    /// Per-seed L2 errors of one cell.
    pub fn l2_values(&self, method: &str, order: usize, dt: f64, n: usize) -> Vec<f64> {
        select(&self.reports, method, order, dt, n).map(|r| r.l2).collect()
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn select<'a>(
    reports: &'a [ErrorReport],
    method: &'a str,
    order: usize,
    dt: f64,
    n: usize,
) -> impl Iterator<Item = &'a ErrorReport> + 'a {
    reports
        .iter()
        .filter(move |r| r.method == method && r.order == order && r.dt == dt && r.n == n)
}

/// Runs a preset. Cell failures are recorded and the run continues.
pub fn run_preset(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let (preset, params) = config.resolve()?;
    let mut ctx = Ctx::new(preset, params)?;
    let panels = ctx.params.strings("panels")?;
    let total = panels.len();
    for (i, panel) in panels.iter().enumerate() {
        ctx.panels_left = total - i;
        ctx.panel_started = Instant::now();
        presets::run_panel(&mut ctx, panel)?;
    }
    ctx.reports.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(a.order.cmp(&b.order))
            .then(a.dt.total_cmp(&b.dt))
            .then(a.n.cmp(&b.n))
            .then(a.seed.cmp(&b.seed))
    });
    Ok(ExperimentOutcome {
        preset,
        params: ctx.params,
        reports: ctx.reports,
        checks: ctx.checks,
        failures: ctx.failures,
        scale_factors: ctx.scale_factors,
        seeds: ctx.seeds,
        elapsed_secs: ctx.started.elapsed().as_secs_f64(),
    })
}

/// Seed of repetition `rep` of the cell `label`.
pub fn cell_seed(master: u64, label: &str, rep: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(master ^ splitmix(h) ^ splitmix(rep.wrapping_add(0x9e37_79b9)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Smallest factor the budget guard applies, even when the budget is exhausted.
const MIN_SCALE: f64 = 1e-3;

/// Per-method results of one cell: method label and its report or error.
pub(crate) type Rows = Vec<(String, Result<ErrorReport>)>;

pub(crate) struct Ctx {
    pub preset: Preset,
    pub params: Params,
    pub master: u64,
    pub reps: usize,
    budget: f64,
    started: Instant,
    panel_started: Instant,
    panels_left: usize,
    pub reports: Vec<ErrorReport>,
    checks: Vec<Check>,
    failures: Vec<CellFailure>,
    scale_factors: BTreeMap<String, f64>,
    seeds: BTreeMap<String, Vec<u64>>,
}

impl Ctx {
    fn new(preset: Preset, params: Params) -> Result<Self> {
        let budget = params.f64("budget_secs")?;
        if !(budget > 0.0) {
            return Err(Error::Config("budget_secs must be positive".into()));
        }
        Ok(Ctx {
            preset,
            master: params.u64("seed")?,
            reps: params.usize("seeds")?,
            params,
            budget,
            started: Instant::now(),
            panel_started: Instant::now(),
            panels_left: 1,
            reports: Vec::new(),
            checks: Vec::new(),
            failures: Vec::new(),
            scale_factors: BTreeMap::new(),
            seeds: BTreeMap::new(),
        })
    }

    /// Runs `f` once per repetition, each with its own derived seed.
    pub fn run_seeds<F>(&mut self, label: &str, f: F)
    where
        F: Fn(u64) -> Result<Rows> + Sync,
    {
        self.run_paired(label, label, f)
    }

    /// Like [`Ctx::run_seeds`], but seeds derive from `key` so that cells sharing
    /// a key can be compared repetition by repetition.
    pub fn run_paired<F>(&mut self, label: &str, key: &str, f: F)
    where
        F: Fn(u64) -> Result<Rows> + Sync,
    {
        let seeds: Vec<u64> = (0..self.reps as u64).map(|r| cell_seed(self.master, key, r)).collect();
        let results: Vec<(u64, Result<Rows>)> = seeds.par_iter().map(|&s| (s, f(s))).collect();
        for (seed, res) in results {
            self.absorb(label, seed, res);
        }
        self.seeds.insert(label.to_string(), seeds);
    }

    /// Runs a seedless cell (model-based solves).
    pub fn run_once<F>(&mut self, label: &str, f: F)
    where
        F: FnOnce() -> Result<Rows>,
    {
        let res = f();
        self.absorb(label, 0, res);
    }

    fn absorb(&mut self, label: &str, seed: u64, res: Result<Rows>) {
        let fail = |cell: String, e: Error| CellFailure {
            cell,
            seed,
            error: e.to_string(),
        };
        match res {
            Ok(rows) => {
                for (method, row) in rows {
                    match row {
                        Ok(r) => self.reports.push(r),
                        Err(e) => self.failures.push(fail(format!("{label}/{method}"), e)),
                    }
                }
            }
            Err(e) => self.failures.push(fail(label.to_string(), e)),
        }
    }

    /// Budget guard. Times `pilot` on a small sample, extrapolates the cost of
    /// `units` repetitions at every size in `ns`, and scales all sizes by one
    /// common factor when the estimate exceeds this panel's share of the budget.
    pub fn scale_sizes<F>(&mut self, label: &str, ns: &[usize], units: usize, pilot: F) -> Vec<usize>
    where
        F: Fn(usize, u64) -> Result<()>,
    {
        let Some(&largest) = ns.iter().max() else {
            return Vec::new();
        };
        let pilot_n = largest.min((largest / 50).max(2000));
        let t0 = Instant::now();
        if pilot(pilot_n, cell_seed(self.master, label, u64::MAX)).is_err() {
            return ns.to_vec();
        }
        let per_sample = t0.elapsed().as_secs_f64() / pilot_n as f64;
        let total: usize = ns.iter().sum();
        let estimate = per_sample * total as f64 * units as f64;
        let share = self.panel_share();
        if estimate <= share {
            return ns.to_vec();
        }
        let factor = (share / estimate).max(MIN_SCALE);
        self.scale_factors.insert(label.to_string(), factor);
        ns.iter().map(|&n| ((n as f64 * factor) as usize).max(1)).collect()
    }

    fn panel_share(&self) -> f64 {
        let remaining = self.budget - (self.panel_started - self.started).as_secs_f64();
        let spent_here = self.panel_started.elapsed().as_secs_f64();
        (remaining / self.panels_left.max(1) as f64 - spent_here).max(0.0)
    }

    pub fn check(&mut self, name: impl Into<String>, advisory: bool, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            passed,
            advisory,
            detail: detail.into(),
        });
    }

    /// Mean L2 error over the seeds of one cell.
    pub fn mean_l2(&self, method: &str, order: usize, dt: f64, n: usize) -> Option<f64> {
        let v: Vec<f64> = select(&self.reports, method, order, dt, n).map(|r| r.l2).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }

    /// `(seed, l2)` pairs of one cell.
    pub fn seed_l2(&self, method: &str, order: usize, dt: f64, n: usize) -> BTreeMap<u64, f64> {
        select(&self.reports, method, order, dt, n).map(|r| (r.seed, r.l2)).collect()
    }

    /// Checks the log-log slope of `errs` against `target +- tol`.
    pub fn slope_check(&mut self, name: &str, advisory: bool, xs: &[f64], errs: &[Option<f64>], target: f64, tol: f64) {
        let pts: Vec<(f64, f64)> = xs
            .iter()
            .zip(errs)
            .filter_map(|(x, e)| e.map(|e| (*x, e)))
            .collect();
        if pts.len() != xs.len() {
            self.check(name, advisory, false, format!("missing {} of {} points", xs.len() - pts.len(), xs.len()));
            return;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
        match fit_order(&x, &y) {
            Ok(fit) => {
                let ok = (fit.slope - target).abs() <= tol;
                self.check(
                    name,
                    advisory,
                    ok,
                    format!("slope {:.3} (target {target} +- {tol}), errors {}", fit.slope, fmt_list(&y)),
                );
            }
            Err(e) => self.check(name, advisory, false, e.to_string()),
        }
    }

    /// Seed summary line for logs and check details.
    pub fn describe(&self, method: &str, order: usize, dt: f64, n: usize) -> String {
        let v: Vec<f64> = select(&self.reports, method, order, dt, n).map(|r| r.l2).collect();
        match (v.as_slice(), seed_summary(&v)) {
            ([x], _) => format!("{x:.4e}"),
            (_, Ok(s)) => format!("mean {:.4e} sd {:.2e} (k={})", s.mean, s.variance.sqrt(), v.len()),
            _ => "missing".into(),
        }
    }
}

pub(crate) fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// `O^T diag(eigenvalues) O` with `O` the orthogonal factor of a seeded Gaussian matrix.
pub fn generate_orthogonal_conjugation(d: usize, eigenvalues: &[f64], seed: u64) -> Result<DMatrix<f64>> {
    if d == 0 {
        return Err(Error::InvalidParameter("dimension must be >= 1".into()));
    }
    if eigenvalues.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: eigenvalues.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let o = g.qr().q();
    let m = o.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(eigenvalues)) * &o;
    Ok((&m + m.transpose()) * 0.5)
}
