//! Error norms, convergence-order fits and seed summaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{Quadrature, Weight};

/// Anything evaluable as a scalar value function of the state.
pub trait ValueFunction: Sync {
    fn value(&self, s: &[f64]) -> f64;
}

impl<F> ValueFunction for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn value(&self, s: &[f64]) -> f64 {
        self(s)
    }
}

/// `sqrt(int (V1 - V2)^2 w ds)` on the quadrature nodes.
pub fn weighted_l2_error(
    v1: &dyn ValueFunction,
    v2: &dyn ValueFunction,
    quad: &Quadrature,
    weight: &Weight,
) -> Result<f64> {
    let mut acc = 0.0;
    for (s, w) in quad.iter() {
        let diff = v1.value(s) - v2.value(s);
        if !diff.is_finite() {
            return Err(Error::NonFinite("value evaluation"));
        }
        acc += w * weight.at(s) * diff * diff;
    }
    Ok(acc.sqrt())
}

pub fn l2_error(v1: &dyn ValueFunction, v2: &dyn ValueFunction, quad: &Quadrature) -> Result<f64> {
    weighted_l2_error(v1, v2, quad, &Weight::Lebesgue)
}

/// Max absolute difference over the quadrature nodes.
pub fn linf_error(v1: &dyn ValueFunction, v2: &dyn ValueFunction, quad: &Quadrature) -> Result<f64> {
    let mut m: f64 = 0.0;
    for (s, _) in quad.iter() {
        let diff = (v1.value(s) - v2.value(s)).abs();
        if !diff.is_finite() {
            return Err(Error::NonFinite("value evaluation"));
        }
        m = m.max(diff);
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub method: String,
    pub order: usize,
    pub dt: f64,
    pub n: usize,
    pub seed: u64,
    pub l2: f64,
    pub linf: f64,
}

impl ErrorReport {
    pub const CSV_HEADER: &'static str = "method,order,dt,n,seed,l2,linf";

    pub fn measure(
        method: impl Into<String>,
        order: usize,
        dt: f64,
        n: usize,
        seed: u64,
        truth: &dyn ValueFunction,
        approx: &dyn ValueFunction,
        quad: &Quadrature,
        weight: &Weight,
    ) -> Result<Self> {
        Ok(ErrorReport {
            method: method.into(),
            order,
            dt,
            n,
            seed,
            l2: weighted_l2_error(truth, approx, quad, weight)?,
            linf: linf_error(truth, approx, quad)?,
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.12e},{:.12e}",
            self.method, self.order, self.dt, self.n, self.seed, self.l2, self.linf
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares of `log(error)` on `log(x)`.
pub fn fit_order(xs: &[f64], errors: &[f64]) -> Result<OrderFit> {
    if xs.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: errors.len(),
        });
    }
    if xs.len() < 3 {
        return Err(Error::DegenerateFit(format!("need >= 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(errors).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateFit("inputs must be positive and finite".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all abscissae equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(OrderFit {
        slope,
        intercept,
        r_squared,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub mean: f64,
    pub median: f64,
    pub variance: f64,
    pub stderr: f64,
}

pub fn seed_summary(values: &[f64]) -> Result<SeedSummary> {
    if values.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "need >= 2 seeds for a summary, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 {
        0.5 * (sorted[mid - 1] + sorted[mid])
    } else {
        sorted[mid]
    };
    Ok(SeedSummary {
        mean,
        median,
        variance,
        stderr: (variance / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    use std::f64::consts::PI;

    fn quad() -> Quadrature {
        Quadrature::gauss_legendre(-PI, PI, 200).unwrap()
    }

    #[test]
    fn l2_examples() {
        let q = quad();
        let f = |s: &[f64]| s[0].sin();
        assert_eq!(l2_error(&f, &f, &q).unwrap(), 0.0);
        let g = |s: &[f64]| s[0].sin() + 0.3;
        assert!((l2_error(&f, &g, &q).unwrap() - 0.3 * (2.0 * PI).sqrt()).abs() < 1e-12);
        let c = |s: &[f64]| s[0].cos();
        let z = |_: &[f64]| 0.0;
        assert!((l2_error(&c, &z, &q).unwrap() - PI.sqrt()).abs() < 1e-12);
        let nan = |_: &[f64]| f64::NAN;
        assert!(l2_error(&c, &nan, &q).is_err());
    }

    #[test]
    fn linf_dominates_normalized_l2() {
        let q = quad();
        let c = |s: &[f64]| (3.0 * s[0]).cos() * s[0];
        let z = |_: &[f64]| 0.0;
        let l2 = l2_error(&c, &z, &q).unwrap();
        let linf = linf_error(&c, &z, &q).unwrap();
        assert!(linf >= l2 / (2.0 * PI).sqrt());
    }

    #[test]
    fn fit_examples() {
        let xs = [5.0, 2.5, 1.25, 0.625];
        let lin: Vec<f64> = xs.iter().map(|x| 0.7 * x).collect();
        let fit = fit_order(&xs, &lin).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);
        let quad: Vec<f64> = xs.iter().map(|x| 3.0 * x * x).collect();
        assert!((fit_order(&xs, &quad).unwrap().slope - 2.0).abs() < 1e-12);
        assert!(fit_order(&xs[..2], &quad[..2]).is_err());
        assert!(fit_order(&xs, &[1.0, 0.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn summary_examples() {
        let s = seed_summary(&[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(s.variance, 0.0);
        let s = seed_summary(&[0.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.variance, s.median), (1.0, 2.0, 1.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
        let draws: Vec<f64> = (0..100).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = seed_summary(&draws).unwrap();
        assert!(s.mean.abs() < 3.0 / 10.0);
        assert!(seed_summary(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn l2_is_a_metric(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0, k in 1u32..5) {
            let q = Quadrature::gauss_legendre(-PI, PI, 64).unwrap();
            let f = move |s: &[f64]| a * (k as f64 * s[0]).cos();
            let g = move |s: &[f64]| b * s[0].sin() + a;
            let h = move |s: &[f64]| c * s[0] * s[0];
            let fg = l2_error(&f, &g, &q).unwrap();
            let gf = l2_error(&g, &f, &q).unwrap();
            let gh = l2_error(&g, &h, &q).unwrap();
            let fh = l2_error(&f, &h, &q).unwrap();
            prop_assert!((fg - gf).abs() <= 1e-12);
            prop_assert!(fh <= fg + gh + 1e-12);
        }

        #[test]
        fn fit_slope_invariant_to_error_scale(scale in 1e-6f64..1e6, p in 0.5f64..3.0) {
            let xs = [1.0f64, 0.5, 0.25, 0.125];
            let errs: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.powf(p) * (1.0 + 0.1 * i as f64)).collect();
            let scaled: Vec<f64> = errs.iter().map(|e| e * scale).collect();
            let a = fit_order(&xs, &errs).unwrap();
            let b = fit_order(&xs, &scaled).unwrap();
            prop_assert!((a.slope - b.slope).abs() < 1e-9);
        }
    }
}
