//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line to stderr
//! (bypassing output capture) before asserting.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde_json::json;

use phibe::estimators::estimator_order_check;
use phibe::experiments::{run_preset, ExperimentConfig, ExperimentOutcome};
use phibe::fdcoeff::fd_coefficients;
use phibe::galerkin::{lq_be_value, lq_phibe_value, lq_true_value, LqParams};
use phibe::metrics::fit_order;

fn report(id: u32, name: &str, passed: bool, detail: &str, elapsed: Duration) {
    let line = format!(
        "criterion {id} {}: {name} ({detail}; {:.2}s)\n",
        if passed { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "criterion {id} failed: {detail}");
}

fn run(preset: &str, panels: &[&str], extra: &[(&str, serde_json::Value)]) -> ExperimentOutcome {
    let mut cfg = ExperimentConfig::new(preset).with("panels", json!(panels));
    for (k, v) in extra {
        cfg = cfg.with(k, v.clone());
    }
    run_preset(&cfg).expect("preset runs")
}

/// All named checks exist and pass; returns the combined detail.
fn checks(outcome: &ExperimentOutcome, names: &[String]) -> (bool, String) {
    let mut ok = outcome.failures.is_empty();
    let mut detail = Vec::new();
    for n in names {
        match outcome.check(n) {
            Some(c) => {
                ok &= c.passed;
                detail.push(format!("{n}: {} {}", if c.passed { "ok" } else { "failed" }, c.detail));
            }
            None => {
                ok = false;
                detail.push(format!("{n}: missing"));
            }
        }
    }
    for f in &outcome.failures {
        detail.push(format!("cell {} failed: {}", f.cell, f.error));
    }
    (ok, detail.join("; "))
}

/// `sum_j a_j j^k` with `a_j = num_j / den_j`, evaluated exactly over a common denominator.
fn exact_moment(weights: &[(i64, i64)], k: u32) -> (i128, i128) {
    let lcm = weights.iter().fold(1i128, |l, &(_, d)| {
        let d = d as i128;
        l / gcd(l, d) * d
    });
    let num: i128 = weights
        .iter()
        .enumerate()
        .map(|(j, &(n, d))| n as i128 * (lcm / d as i128) * (j as i128).pow(k))
        .sum();
    (num, lcm)
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

#[test]
fn criterion_1_coefficient_exactness() {
    let t = Instant::now();
    let mut ok = true;
    let mut worst_float = 0.0f64;
    for i in 1..=8usize {
        let c = fd_coefficients(i).unwrap();
        for k in 0..=i as u32 {
            let (num, den) = exact_moment(c.exact_weights(), k);
            ok &= num == if k == 1 { den } else { 0 };
        }
        ok &= c.moment_residuals().iter().all(|r| r.abs() <= 1e-12);
        if i <= 6 {
            for k in 0..=i as i32 {
                let m: f64 = c.weights().iter().enumerate().map(|(j, a)| a * (j as f64).powi(k)).sum();
                worst_float = worst_float.max((m - f64::from(u8::from(k == 1))).abs());
            }
        }
    }
    ok &= worst_float <= 1e-12;
    ok &= fd_coefficients(1).unwrap().weights() == [-1.0, 1.0];
    ok &= fd_coefficients(2).unwrap().weights() == [-1.5, 2.0, -0.5];
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    report(
        1,
        "coefficient exactness",
        ok,
        &format!("exact moments i=1..8, max f64 moment residual i<=6 {worst_float:.1e}"),
        elapsed,
    );
}

#[test]
fn criterion_2_estimator_order() {
    let t = Instant::now();
    let lambda = 0.05;
    let grid = [5.0, 2.5, 1.25, 0.625];
    let a = DMatrix::from_element(1, 1, lambda);
    let mut ok = true;
    let mut detail = Vec::new();
    for i in 1..=3 {
        let c = fd_coefficients(i).unwrap();
        let check = estimator_order_check(&a, &c, &grid).unwrap();
        // Independent surrogate: sum_j a_j e^{lambda j dt} / dt.
        let errs: Vec<f64> = grid
            .iter()
            .map(|dt| {
                let hat: f64 = c
                    .weights()
                    .iter()
                    .enumerate()
                    .map(|(j, w)| w * (lambda * j as f64 * dt).exp())
                    .sum::<f64>()
                    / dt;
                (hat - lambda).abs()
            })
            .collect();
        for (e, lib) in errs.iter().zip(&check.errors) {
            ok &= (e - lib).abs() <= 1e-9 * e.max(1e-300) + 1e-15;
        }
        let slope = fit_order(&grid, &errs).unwrap().slope;
        ok &= (slope - i as f64).abs() <= 0.25;
        detail.push(format!("i={i} slope {slope:.3}"));
    }
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(5);
    report(2, "estimator order", ok, &detail.join(", "), elapsed);
}

fn dt_sweep(id: u32, tag: &str, limit: u64) {
    let t = Instant::now();
    let outcome = run(tag, &["dt"], &[]);
    let names: Vec<String> = ["slope.be", "slope.phibe1", "slope.phibe2", "phibe2_below_be"]
        .iter()
        .map(|s| format!("{tag}.dt.{s}"))
        .collect();
    let (mut ok, detail) = checks(&outcome, &names);
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(limit);
    let what = if tag == "fig4" {
        "discretization order, deterministic"
    } else {
        "discretization order, stochastic"
    };
    report(id, what, ok, &detail, elapsed);
}

#[test]
fn criterion_3_discretization_order_deterministic() {
    dt_sweep(3, "fig4", 60);
}

#[test]
fn criterion_4_discretization_order_stochastic() {
    dt_sweep(4, "fig5", 120);
}

#[test]
fn criterion_5_lq_analytics() {
    let t = Instant::now();
    // (alpha = b, sigma, beta, dt) per case; q = 1, r = 0.1, K = 2.
    let cases = [(0.25, 0.5, 1.0, 0.1), (0.25, 0.5, 1.0, 0.01), (1.0, 1.0, 1.0, 0.1), (0.25, 0.5, 0.1, 0.1)];
    let mut ok = true;
    let mut detail = Vec::new();
    for (c, &(ab, sigma, beta, dt)) in cases.iter().enumerate() {
        let p = LqParams {
            q: 1.0,
            r_ctrl: 0.1,
            gain: 2.0,
            alpha: ab,
            b_ctrl: ab,
            sigma,
            beta,
        };
        let rw = 1.0 + 0.1 * 4.0;
        let lam = ab - 2.0 * ab;
        let gamma = (-beta * dt).exp();
        // Independent closed forms.
        let a1 = rw / (beta - 2.0 * lam);
        let a1r = rw * dt / (1.0 - gamma * (2.0 * lam * dt).exp());
        let lam_hat = ((lam * dt).exp() - 1.0) / dt;
        let eta = ((lam * dt).exp() - 1.0).powi(2) / dt;
        let a1p = rw / (beta - 2.0 * lam_hat - eta);
        let var_rate = sigma * sigma * ((2.0 * lam * dt).exp() - 1.0) / (2.0 * lam * dt);

        let (t1, _) = lq_true_value(&p).unwrap();
        let (r1, _) = lq_be_value(rw, lam, sigma, beta, dt).unwrap();
        let (p1, p0) = lq_phibe_value(rw, lam, sigma, beta, dt).unwrap();
        ok &= (t1 - a1).abs() < 1e-12 && (r1 - a1r).abs() < 1e-10 && (p1 - a1p).abs() < 1e-10;

        // beta V = R s^2 + lam_hat s V' + 1/2 (var_rate + eta s^2) V'' with V = p1 s^2 + p0.
        let res_quad = beta * p1 - rw - 2.0 * lam_hat * p1 - eta * p1;
        let res_const = beta * p0 - var_rate * p1;
        ok &= res_quad.abs() < 1e-12 && res_const.abs() < 1e-12;
        ok &= (p1 - a1).abs() < (r1 - a1).abs();
        detail.push(format!(
            "case{}: a1 {a1:.6} a1R {a1r:.6} a1P {a1p:.6} residual ({res_quad:.0e}, {res_const:.0e})",
            c + 1
        ));
        if c == 0 {
            ok &= (a1 - 0.933333).abs() < 1e-5 && (a1r - 1.00508).abs() < 1e-5 && (a1p - 0.941044).abs() < 1e-5;
        }
    }
    let elapsed = t.elapsed();
    ok &= elapsed < Duration::from_secs(1);
    report(5, "LQ analytics", ok, &detail.join("; "), elapsed);
}

#[test]
fn criterion_6_model_free_dominance() {
    let t = Instant::now();
    let fig1 = run("fig1", &["a"], &[]);
    let table = run("table1", &["data"], &[]);
    let (a_ok, a_detail) = checks(&fig1, &["fig1.a.phibe_mf_below_lstd".to_string()]);
    let (b_ok, b_detail) = checks(&table, &["table1.data.phibe_below_lstd".to_string()]);
    let elapsed = t.elapsed();
    let ok = a_ok && b_ok && elapsed < Duration::from_secs(600);
    report(6, "model-free dominance", ok, &format!("{a_detail}; {b_detail}"), elapsed);
}

#[test]
fn criterion_7_sample_error_scaling() {
    let t = Instant::now();
    let outcome = run("fig5", &["pairs"], &[]);
    let (ok, detail) = checks(&outcome, &["fig5.pairs.sample_slope".to_string()]);
    let elapsed = t.elapsed();
    report(7, "sample-error scaling", ok && elapsed < Duration::from_secs(300), &detail, elapsed);
}

#[test]
fn criterion_8_bias_variance_tradeoff() {
    let t = Instant::now();
    let outcome = run("fig5", &["budget"], &[]);
    let (ok, detail) = checks(&outcome, &["fig5.budget.phibe1_dt0.1_below_dt1".to_string()]);
    let advisory = outcome
        .check("fig5.budget.phibe1_dt0.01_above_dt0.1")
        .map_or("advisory check missing".to_string(), |c| {
            format!("advisory {}: {}", if c.passed { "ok" } else { "failed" }, c.detail)
        });
    let elapsed = t.elapsed();
    report(
        8,
        "bias-variance tradeoff",
        ok && elapsed < Duration::from_secs(600),
        &format!("{detail}; {advisory}"),
        elapsed,
    );
}

#[test]
fn criterion_9_high_dimensional() {
    let t = Instant::now();
    let outcome = run("fig9", &["data"], &[]);
    let names: Vec<String> = ["fig9.phibe_decreases", "fig9.lstd_decreases", "fig9.phibe_le_lstd_dt1", "fig9.phibe_le_lstd_dt0.1"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let (ok, detail) = checks(&outcome, &names);
    let elapsed = t.elapsed();
    report(9, "high-dimensional sanity", ok && elapsed < Duration::from_secs(900), &detail, elapsed);
}
