//! Quadrature rules over state domains.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::dynamics::stream_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QuadratureKind {
    UniformTrapezoid,
    GaussLegendre,
    MonteCarlo,
}

/// Nodes (row-major, `dim` columns) and weights. Deterministic rules integrate
/// against Lebesgue measure, so weights sum to the domain's volume.
#[derive(Debug, Clone)]
pub struct Quadrature {
    pub kind: QuadratureKind,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
}

impl Quadrature {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.nodes.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    pub fn integrate<F: Fn(&[f64]) -> f64>(&self, f: F) -> f64 {
        self.iter().map(|(x, w)| w * f(x)).sum()
    }

    pub fn trapezoid(a: f64, b: f64, n: usize) -> Result<Self> {
        check_interval(a, b)?;
        if n < 2 {
            return Err(Error::InvalidParameter("trapezoid rule needs >= 2 nodes".into()));
        }
        let h = (b - a) / (n - 1) as f64;
        let nodes = (0..n).map(|i| a + h * i as f64).collect();
        let weights = (0..n)
            .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
            .collect();
        Ok(Quadrature {
            kind: QuadratureKind::UniformTrapezoid,
            nodes,
            weights,
            dim: 1,
        })
    }

    pub fn gauss_legendre(a: f64, b: f64, n: usize) -> Result<Self> {
        check_interval(a, b)?;
        if n == 0 {
            return Err(Error::InvalidParameter("Gauss-Legendre needs >= 1 node".into()));
        }
        let (x, w) = gauss_legendre_unit(n);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (b + a);
        Ok(Quadrature {
            kind: QuadratureKind::GaussLegendre,
            nodes: x.iter().map(|t| mid + half * t).collect(),
            weights: w.iter().map(|v| v * half).collect(),
            dim: 1,
        })
    }

    /// `n` uniform samples on the box; weights `volume / n`.
    pub fn monte_carlo(lo: &[f64], hi: &[f64], n: usize, seed: u64) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for (l, h) in lo.iter().zip(hi) {
            check_interval(*l, *h)?;
        }
        if n == 0 {
            return Err(Error::InvalidParameter("Monte Carlo rule needs >= 1 node".into()));
        }
        let d = lo.len();
        let volume: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).product();
        let mut rng = stream_rng(seed, u64::MAX);
        let mut nodes = Vec::with_capacity(n * d);
        for _ in 0..n {
            for k in 0..d {
                nodes.push(lo[k] + (hi[k] - lo[k]) * rng.random::<f64>());
            }
        }
        Ok(Quadrature {
            kind: QuadratureKind::MonteCarlo,
            nodes,
            weights: vec![volume / n as f64; n],
            dim: d,
        })
    }
}

fn check_interval(a: f64, b: f64) -> Result<()> {
    if !(a.is_finite() && b.is_finite() && b > a) {
        return Err(Error::InvalidParameter(format!("invalid interval [{a}, {b}]")));
    }
    Ok(())
}

/// Nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = n.div_ceil(2);
    for i in 0..half {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        dp = if d != 0.0 { d } else { dp };
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = wi;
        w[n - 1 - i] = wi;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = z;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
    (p1, dp)
}

/// Physicists' Gauss-Hermite rule: `int e^{-x^2} f(x) dx ~ sum w_i f(x_i)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let pim4 = PI.powf(-0.25);
    let mut z = 0.0;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            // Orthonormal recurrence avoids overflow for large n.
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    // Sort ascending.
    x.reverse();
    w.reverse();
    (x, w)
}

/// `E[f(mean + sqrt(var) Z)]` for standard normal `Z` with a Gauss-Hermite rule.
pub fn gaussian_expectation<F: Fn(f64) -> f64>(rule: &(Vec<f64>, Vec<f64>), mean: f64, var: f64, f: F) -> f64 {
    let scale = (2.0 * var.max(0.0)).sqrt();
    let norm = 1.0 / PI.sqrt();
    rule.0
        .iter()
        .zip(&rule.1)
        .map(|(x, w)| w * f(mean + scale * x))
        .sum::<f64>()
        * norm
}

/// Weight applied on top of a quadrature rule's measure.
#[derive(Clone, Default)]
pub enum Weight {
    #[default]
    Lebesgue,
    Constant(f64),
    Density(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Weight {
    pub fn at(&self, s: &[f64]) -> f64 {
        match self {
            Weight::Lebesgue => 1.0,
            Weight::Constant(c) => *c,
            Weight::Density(f) => f(s),
        }
    }
}

impl fmt::Debug for Weight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Weight::Lebesgue => write!(f, "Lebesgue"),
            Weight::Constant(c) => write!(f, "Constant({c})"),
            Weight::Density(_) => write!(f, "Density(..)"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_measure() {
        for n in [1, 2, 5, 64, 400, 800] {
            let q = Quadrature::gauss_legendre(-PI, PI, n).unwrap();
            let s: f64 = q.weights().iter().sum();
            assert!((s - 2.0 * PI).abs() < 1e-10, "n={n}: {s}");
        }
        let t = Quadrature::trapezoid(-1.0, 3.0, 101).unwrap();
        assert!((t.weights().iter().sum::<f64>() - 4.0).abs() < 1e-12);
        let mc = Quadrature::monte_carlo(&[-1.0, 0.0], &[1.0, 3.0], 10, 1).unwrap();
        assert!((mc.weights().iter().sum::<f64>() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn gauss_legendre_exact_for_degree_2n_minus_1() {
        for n in [1usize, 3, 8, 20] {
            let q = Quadrature::gauss_legendre(-0.5, 2.0, n).unwrap();
            for deg in 0..(2 * n) {
                let got = q.integrate(|x| x[0].powi(deg as i32));
                let want = (2f64.powi(deg as i32 + 1) - (-0.5f64).powi(deg as i32 + 1)) / (deg as f64 + 1.0);
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "n={n} deg={deg}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn hermite_moments() {
        let rule = gauss_hermite(64);
        // E[Z^2] = 1, E[Z^4] = 3, E[cos(Z)] = e^{-1/2}
        assert!((gaussian_expectation(&rule, 0.0, 1.0, |z| z * z) - 1.0).abs() < 1e-12);
        assert!((gaussian_expectation(&rule, 0.0, 1.0, |z| z.powi(4)) - 3.0).abs() < 1e-11);
        let got = gaussian_expectation(&rule, 0.3, 2.0, |z| (3.0 * z).cos());
        let want = (0.9f64).cos() * (-9.0f64).exp();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        let (x, _) = &rule;
        assert!(x.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn rejects_bad_intervals() {
        assert!(Quadrature::gauss_legendre(1.0, 1.0, 4).is_err());
        assert!(Quadrature::trapezoid(0.0, 1.0, 1).is_err());
    }
}
