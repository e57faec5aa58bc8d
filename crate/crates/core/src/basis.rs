//! Basis families with value, gradient and Hessian evaluation.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::{Quadrature, Weight};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Basis {
    /// `(1/sqrt(pi)) {1/sqrt(2), cos(m s), sin(m s)}_{m=1..M}` on `[-pi, pi]`,
    /// ordered `1, cos s, sin s, cos 2s, sin 2s, ...`.
    #[serde(rename = "fourier")]
    FourierPeriodic { modes: usize },
    /// `{1, s_i, s_i s_j (i <= j)}` in `d` dimensions.
    #[serde(rename = "poly2")]
    PolynomialUpTo2 { dim: usize },
    /// `{1, s, ..., s^degree}` in one dimension.
    #[serde(rename = "monomial")]
    Monomial1D { degree: usize },
}

/// Values and derivatives of every basis function at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisEval {
    pub dim: usize,
    /// `p` values.
    pub phi: Vec<f64>,
    /// `p x d`, row-major.
    pub grad: Vec<f64>,
    /// `p x d x d`, row-major.
    pub hess: Vec<f64>,
}

impl BasisEval {
    pub fn grad_of(&self, k: usize) -> &[f64] {
        &self.grad[k * self.dim..(k + 1) * self.dim]
    }

    pub fn hess_of(&self, k: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        &self.hess[k * dd..(k + 1) * dd]
    }
}

/// Wraps `s` into `[-pi, pi)`.
pub fn wrap_angle(s: f64) -> f64 {
    let w = (s + PI).rem_euclid(2.0 * PI) - PI;
    if w >= PI {
        w - 2.0 * PI
    } else {
        w
    }
}

impl Basis {
    pub fn len(&self) -> usize {
        match *self {
            Basis::FourierPeriodic { modes } => 2 * modes + 1,
            Basis::PolynomialUpTo2 { dim } => 1 + dim + dim * (dim + 1) / 2,
            Basis::Monomial1D { degree } => degree + 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        match *self {
            Basis::PolynomialUpTo2 { dim } => dim,
            _ => 1,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Basis::FourierPeriodic { modes } => format!("fourier(M={modes})"),
            Basis::PolynomialUpTo2 { dim } => format!("poly2(d={dim})"),
            Basis::Monomial1D { degree } => format!("monomial(deg={degree})"),
        }
    }

    fn check(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: s.len(),
            });
        }
        Ok(())
    }

    /// Basis values only, written into `out` (length `p`).
    pub fn values_into(&self, s: &[f64], out: &mut [f64]) {
        match *self {
            Basis::FourierPeriodic { modes } => {
                let x = wrap_angle(s[0]);
                let c = 1.0 / PI.sqrt();
                out[0] = c / 2f64.sqrt();
                for m in 1..=modes {
                    let (sn, cs) = (m as f64 * x).sin_cos();
                    out[2 * m - 1] = c * cs;
                    out[2 * m] = c * sn;
                }
            }
            Basis::PolynomialUpTo2 { dim } => {
                out[0] = 1.0;
                out[1..=dim].copy_from_slice(s);
                let mut k = dim + 1;
                for i in 0..dim {
                    for j in i..dim {
                        out[k] = s[i] * s[j];
                        k += 1;
                    }
                }
            }
            Basis::Monomial1D { degree } => {
                let mut v = 1.0;
                for o in out.iter_mut().take(degree + 1) {
                    *o = v;
                    v *= s[0];
                }
            }
        }
    }

    pub fn values(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check(s)?;
        let mut out = vec![0.0; self.len()];
        self.values_into(s, &mut out);
        Ok(out)
    }

    /// `Phi`, `grad Phi` and `Hess Phi` at `s`.
    pub fn eval(&self, s: &[f64]) -> Result<BasisEval> {
        self.check(s)?;
        let p = self.len();
        let d = self.dim();
        let mut e = BasisEval {
            dim: d,
            phi: vec![0.0; p],
            grad: vec![0.0; p * d],
            hess: vec![0.0; p * d * d],
        };
        self.values_into(s, &mut e.phi);
        match *self {
            Basis::FourierPeriodic { modes } => {
                let x = wrap_angle(s[0]);
                let c = 1.0 / PI.sqrt();
                for m in 1..=modes {
                    let mf = m as f64;
                    let (sn, cs) = (mf * x).sin_cos();
                    e.grad[2 * m - 1] = -c * mf * sn;
                    e.grad[2 * m] = c * mf * cs;
                    e.hess[2 * m - 1] = -c * mf * mf * cs;
                    e.hess[2 * m] = -c * mf * mf * sn;
                }
            }
            Basis::PolynomialUpTo2 { dim } => {
                for i in 0..dim {
                    e.grad[(1 + i) * d + i] = 1.0;
                }
                let mut k = dim + 1;
                for i in 0..dim {
                    for j in i..dim {
                        e.grad[k * d + i] += s[j];
                        e.grad[k * d + j] += s[i];
                        let h = &mut e.hess[k * d * d..(k + 1) * d * d];
                        h[i * d + j] += 1.0;
                        h[j * d + i] += 1.0;
                        k += 1;
                    }
                }
            }
            Basis::Monomial1D { degree } => {
                let x = s[0];
                for n in 1..=degree {
                    let nf = n as f64;
                    e.grad[n] = nf * x.powi(n as i32 - 1);
                    if n >= 2 {
                        e.hess[n] = nf * (nf - 1.0) * x.powi(n as i32 - 2);
                    }
                }
            }
        }
        Ok(e)
    }

    /// Writes `beta phi_l(s) - mu . grad phi_l(s) - 1/2 Sigma : Hess phi_l(s)`
    /// for every `l` into `out`, and `phi(s)` into `phi`. `sigma` is row-major
    /// `d x d`; `None` drops the second-order term.
    ///
    /// Specialized per family so high-dimensional accumulation never builds
    /// the dense Hessian tensor.
    pub fn shifted_generator_into(
        &self,
        s: &[f64],
        beta: f64,
        mu: &[f64],
        sigma: Option<&[f64]>,
        phi: &mut [f64],
        out: &mut [f64],
    ) {
        self.values_into(s, phi);
        match *self {
            Basis::FourierPeriodic { modes } => {
                let x = wrap_angle(s[0]);
                let c = 1.0 / PI.sqrt();
                let half_sig = sigma.map_or(0.0, |m| 0.5 * m[0]);
                out[0] = beta * phi[0];
                for m in 1..=modes {
                    let mf = m as f64;
                    let (sn, cs) = (mf * x).sin_cos();
                    // d/ds cos = -m sin, d2 = -m^2 cos; d/ds sin = m cos, d2 = -m^2 sin
                    out[2 * m - 1] = beta * phi[2 * m - 1] - mu[0] * (-c * mf * sn)
                        + half_sig * c * mf * mf * cs;
                    out[2 * m] = beta * phi[2 * m] - mu[0] * (c * mf * cs) + half_sig * c * mf * mf * sn;
                }
            }
            Basis::PolynomialUpTo2 { dim } => {
                out[0] = beta;
                for i in 0..dim {
                    out[1 + i] = beta * s[i] - mu[i];
                }
                let mut k = dim + 1;
                for i in 0..dim {
                    for j in i..dim {
                        let drift = mu[i] * s[j] + mu[j] * s[i];
                        let diff = match sigma {
                            Some(m) => 0.5 * (m[i * dim + j] + m[j * dim + i]),
                            None => 0.0,
                        };
                        out[k] = beta * phi[k] - drift - diff;
                        k += 1;
                    }
                }
            }
            Basis::Monomial1D { degree } => {
                let x = s[0];
                let half_sig = sigma.map_or(0.0, |m| 0.5 * m[0]);
                out[0] = beta;
                for n in 1..=degree {
                    let nf = n as f64;
                    let g = nf * x.powi(n as i32 - 1);
                    let h = if n >= 2 {
                        nf * (nf - 1.0) * x.powi(n as i32 - 2)
                    } else {
                        0.0
                    };
                    out[n] = beta * phi[n] - mu[0] * g - half_sig * h;
                }
            }
        }
    }
}

/// `G = int Phi Phi^T w ds` over the quadrature nodes.
pub fn gram_matrix(basis: &Basis, quad: &Quadrature, weight: &Weight) -> Result<DMatrix<f64>> {
    if quad.dim() != basis.dim() {
        return Err(Error::DimensionMismatch {
            expected: basis.dim(),
            got: quad.dim(),
        });
    }
    let p = basis.len();
    let mut g = DMatrix::zeros(p, p);
    let mut phi = vec![0.0; p];
    for (node, w) in quad.iter() {
        let wt = w * weight.at(node);
        basis.values_into(node, &mut phi);
        for k in 0..p {
            let a = wt * phi[k];
            for l in k..p {
                g[(k, l)] += a * phi[l];
            }
        }
    }
    for k in 0..p {
        for l in 0..k {
            g[(k, l)] = g[(l, k)];
        }
    }
    if g.iter().any(|v: &f64| !v.is_finite()) {
        return Err(Error::NonFinite("gram matrix"));
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const H: f64 = 1e-5;

    fn fd_check(basis: &Basis, s: &[f64]) {
        let e = basis.eval(s).unwrap();
        let d = basis.dim();
        let p = basis.len();
        for i in 0..d {
            let mut sp = s.to_vec();
            let mut sm = s.to_vec();
            sp[i] += H;
            sm[i] -= H;
            let ep = basis.eval(&sp).unwrap();
            let em = basis.eval(&sm).unwrap();
            for k in 0..p {
                let fd = (ep.phi[k] - em.phi[k]) / (2.0 * H);
                assert!((e.grad_of(k)[i] - fd).abs() <= 1e-5, "grad k={k} i={i}");
                for j in 0..d {
                    let fd2 = (ep.grad_of(k)[j] - em.grad_of(k)[j]) / (2.0 * H);
                    assert!((e.hess_of(k)[i * d + j] - fd2).abs() <= 1e-4, "hess k={k}");
                }
            }
        }
    }

    #[test]
    fn fourier_at_zero() {
        let b = Basis::FourierPeriodic { modes: 1 };
        let v = b.values(&[0.0]).unwrap();
        assert!((v[0] - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-15);
        assert!((v[1] - 1.0 / PI.sqrt()).abs() < 1e-15);
        assert_eq!(v[2], 0.0);
    }

    #[test]
    fn fourier_second_derivative_identity() {
        let b = Basis::FourierPeriodic { modes: 5 };
        let s = 0.83;
        let e = b.eval(&[s]).unwrap();
        for m in 1..=5 {
            let mf = m as f64;
            assert!((e.hess[2 * m - 1] + mf * mf * (mf * s).cos() / PI.sqrt()).abs() < 1e-14 * mf * mf);
        }
    }

    #[test]
    fn polynomial_one_dimension() {
        let b = Basis::PolynomialUpTo2 { dim: 1 };
        let e = b.eval(&[2.0]).unwrap();
        assert_eq!(e.phi, vec![1.0, 2.0, 4.0]);
        assert_eq!(e.grad, vec![0.0, 1.0, 4.0]);
        assert_eq!(e.hess, vec![0.0, 0.0, 2.0]);
        assert_eq!(Basis::PolynomialUpTo2 { dim: 10 }.len(), 66);
    }

    #[test]
    fn wrap_into_principal_interval() {
        assert!((wrap_angle(3.0 * PI) + PI).abs() < 1e-12);
        assert!((wrap_angle(0.5 + 4.0 * PI) - 0.5).abs() < 1e-12);
        assert_eq!(wrap_angle(-PI), -PI);
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences(x in -3.0f64..3.0, y in -1.0f64..1.0, z in -1.0f64..1.0) {
            fd_check(&Basis::FourierPeriodic { modes: 4 }, &[x]);
            fd_check(&Basis::PolynomialUpTo2 { dim: 3 }, &[x / 3.0, y, z]);
            fd_check(&Basis::Monomial1D { degree: 6 }, &[y]);
        }

        #[test]
        fn generator_matches_dense_evaluation(
            x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
            m0 in -2.0f64..2.0, m1 in -2.0f64..2.0, m2 in -2.0f64..2.0,
            s01 in -1.0f64..1.0, beta in 0.1f64..5.0,
        ) {
            let s = [x, y, z];
            let mu = [m0, m1, m2];
            let sig = [1.0, s01, 0.2, s01, 0.7, -0.1, 0.2, -0.1, 0.4];
            let cases: Vec<(Basis, Vec<f64>, Vec<f64>, Vec<f64>)> = vec![
                (Basis::PolynomialUpTo2 { dim: 3 }, s.to_vec(), mu.to_vec(), sig.to_vec()),
                (Basis::FourierPeriodic { modes: 3 }, vec![3.0 * x], vec![m0], vec![0.9]),
                (Basis::Monomial1D { degree: 5 }, vec![x], vec![m1], vec![0.3]),
            ];
            for (basis, s, mu, sig) in cases {
                let d = basis.dim();
                let e = basis.eval(&s).unwrap();
                let mut phi = vec![0.0; basis.len()];
                let mut out = vec![0.0; basis.len()];
                basis.shifted_generator_into(&s, beta, &mu, Some(&sig), &mut phi, &mut out);
                for k in 0..basis.len() {
                    let drift: f64 = (0..d).map(|i| mu[i] * e.grad_of(k)[i]).sum();
                    let diff: f64 = (0..d * d).map(|ij| sig[ij] * e.hess_of(k)[ij]).sum();
                    let want = beta * e.phi[k] - drift - 0.5 * diff;
                    prop_assert!((out[k] - want).abs() < 1e-12 * (1.0 + want.abs()));
                }
            }
        }
    }

    #[test]
    fn fourier_gram_is_identity() {
        let b = Basis::FourierPeriodic { modes: 4 };
        let q = Quadrature::gauss_legendre(-PI, PI, 200).unwrap();
        let g = gram_matrix(&b, &q, &Weight::Lebesgue).unwrap();
        let err = (&g - DMatrix::identity(9, 9)).abs().max();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_and_polynomial_gram_entries() {
        let q = Quadrature::gauss_legendre(-PI, PI, 20).unwrap();
        let g = gram_matrix(&Basis::Monomial1D { degree: 0 }, &q, &Weight::Lebesgue).unwrap();
        assert!((g[(0, 0)] - 2.0 * PI).abs() < 1e-12);
        let q = Quadrature::gauss_legendre(-1.0, 1.0, 20).unwrap();
        let g = gram_matrix(&Basis::PolynomialUpTo2 { dim: 1 }, &q, &Weight::Lebesgue).unwrap();
        assert!((g[(0, 2)] - 2.0 / 3.0).abs() < 1e-14);
        assert_eq!(g, g.transpose());
    }

    #[test]
    fn configured_grams_are_positive_definite() {
        let cases = [
            (Basis::FourierPeriodic { modes: 4 }, -PI, PI),
            (Basis::FourierPeriodic { modes: 30 }, -PI, PI),
            (Basis::PolynomialUpTo2 { dim: 1 }, -1.0, 1.0),
            (Basis::Monomial1D { degree: 8 }, -1.0, 1.0),
        ];
        for (b, lo, hi) in cases {
            let q = Quadrature::gauss_legendre(lo, hi, 400).unwrap();
            let g = gram_matrix(&b, &q, &Weight::Lebesgue).unwrap();
            let min = g.symmetric_eigenvalues().min();
            assert!(min > 0.0, "{} min eig {min}", b.name());
        }
        let q = Quadrature::monte_carlo(&[-1.0; 10], &[1.0; 10], 20_000, 3).unwrap();
        let g = gram_matrix(&Basis::PolynomialUpTo2 { dim: 10 }, &q, &Weight::Lebesgue).unwrap();
        assert!(g.symmetric_eigenvalues().min() > 0.0);
    }
}
