//! Backward-looking multi-step difference weights.
//!
//! The order-`i` weights `a_0..a_i` satisfy the moment conditions
//! `sum_j a_j j^k = [k == 1]` for `0 <= k <= i` (with `0^0 = 1`), so that
//! `(1/dt) sum_j a_j (s_{j dt} - s_0)` approximates the time derivative of a
//! smooth path at `t = 0` to `O(dt^i)`.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdCoefficients {
    order: usize,
    weights: Vec<f64>,
    /// Exact weights as reduced `(numerator, denominator)` pairs.
    exact: Vec<(i64, i64)>,
}

impl FdCoefficients {
    pub fn order(&self) -> usize {
        self.order
    }

    /// `a_0..=a_order`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weights `a_1..=a_order`; `a_0` multiplies a zero displacement and never
    /// contributes to the drift or diffusion surrogates.
    pub fn step_weights(&self) -> &[f64] {
        &self.weights[1..]
    }

    pub fn exact_weights(&self) -> &[(i64, i64)] {
        &self.exact
    }

    /// Residual of each moment condition `sum_j a_j j^k - [k == 1]` for
    /// `k = 0..=order`, evaluated in rational arithmetic on the exact weights.
    pub fn moment_residuals(&self) -> Vec<f64> {
        (0..=self.order)
            .map(|k| {
                let mut s = BigRational::zero();
                for (j, &(num, den)) in self.exact.iter().enumerate() {
                    let jk = BigInt::from(j).pow(k as u32);
                    s += BigRational::new(BigInt::from(num) * jk, BigInt::from(den));
                }
                if k == 1 {
                    s -= BigRational::one();
                }
                ratio_to_f64(&s)
            })
            .collect()
    }

    /// The same residuals evaluated on the rounded `f64` weights with `f64`
    /// summation. High moments of orders 7 and 8 combine terms near `8^8`, so
    /// these sit at the level of `f64` rounding of the weights, not zero.
    pub fn float_moment_residuals(&self) -> Vec<f64> {
        (0..=self.order)
            .map(|k| {
                let s: f64 = self
                    .weights
                    .iter()
                    .enumerate()
                    .map(|(j, a)| a * pow_zero_one(j as f64, k))
                    .sum();
                s - if k == 1 { 1.0 } else { 0.0 }
            })
            .collect()
    }
}

fn pow_zero_one(base: f64, exp: usize) -> f64 {
    if exp == 0 {
        1.0
    } else {
        base.powi(exp as i32)
    }
}

/// Solves the `(order+1)`-square Vandermonde system `(A)_{kj} = j^k` exactly in
/// rational arithmetic and rounds the result to `f64`.
pub fn fd_coefficients(order: usize) -> Result<FdCoefficients> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::UnsupportedOrder(order));
    }
    let n = order + 1;
    let mut aug: Vec<Vec<BigRational>> = (0..n)
        .map(|k| {
            let mut row: Vec<BigRational> = (0..n)
                .map(|j| {
                    BigRational::from_integer(BigInt::from(j).pow(k as u32))
                })
                .collect();
            row.push(if k == 1 {
                BigRational::one()
            } else {
                BigRational::zero()
            });
            row
        })
        .collect();

    // Exact arithmetic: any nonzero pivot works.
    for col in 0..n {
        let pivot = (col..n)
            .find(|&r| !aug[r][col].is_zero())
            .expect("Vandermonde matrix on distinct nodes is nonsingular");
        aug.swap(col, pivot);
        let inv = aug[col][col].recip();
        for entry in aug[col].iter_mut() {
            *entry = &*entry * &inv;
        }
        for r in 0..n {
            if r != col && !aug[r][col].is_zero() {
                let factor = aug[r][col].clone();
                for c in col..=n {
                    let delta = &factor * &aug[col][c];
                    aug[r][c] = &aug[r][c] - &delta;
                }
            }
        }
    }

    let weights = aug
        .iter()
        .map(|row| ratio_to_f64(&row[n]))
        .collect::<Vec<_>>();
    let exact = aug
        .iter()
        .map(|row| {
            let r = &row[n];
            let num = r.numer().to_i64().expect("order <= 8 numerators fit in i64");
            let den = r.denom().to_i64().expect("order <= 8 denominators fit in i64");
            (num, den)
        })
        .collect();
    Ok(FdCoefficients {
        order,
        weights,
        exact,
    })
}

fn ratio_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// `C_i = sum_j |a_j| j^(i+1) / (i+1)!`.
pub fn order_constant(coeffs: &FdCoefficients) -> f64 {
    let i = coeffs.order;
    let factorial: f64 = (1..=i + 1).map(|k| k as f64).product();
    coeffs
        .weights
        .iter()
        .enumerate()
        .map(|(j, a)| a.abs() * (j as f64).powi(i as i32 + 1))
        .sum::<f64>()
        / factorial
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Derivative at 0 of the Lagrange basis polynomial through nodes 0..=n,
    /// evaluated with i128 fractions. Independent of the Vandermonde solve.
    fn lagrange_derivative_weights(n: usize) -> Vec<f64> {
        let nodes: Vec<i128> = (0..=n as i128).collect();
        nodes
            .iter()
            .map(|&j| {
                if j == 0 {
                    // L_0'(0) = sum_{m != 0} 1 / (0 - m)
                    nodes[1..].iter().map(|&m| -1.0 / m as f64).sum()
                } else {
                    let mut num: i128 = 1;
                    let mut den: i128 = 1;
                    for &m in &nodes {
                        if m != j {
                            den *= j - m;
                            if m != 0 {
                                num *= -m;
                            }
                        }
                    }
                    num as f64 / den as f64
                }
            })
            .collect()
    }

    #[test]
    fn first_and_second_order_are_exact() {
        assert_eq!(fd_coefficients(1).unwrap().weights(), &[-1.0, 1.0]);
        assert_eq!(fd_coefficients(2).unwrap().weights(), &[-1.5, 2.0, -0.5]);
    }

    #[test]
    fn third_order_matches_lagrange_oracle() {
        let oracle = lagrange_derivative_weights(3);
        let expected = [-11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0];
        for (o, e) in oracle.iter().zip(expected) {
            assert!((o - e).abs() < 1e-15);
        }
        let got = fd_coefficients(3).unwrap();
        for (g, e) in got.weights().iter().zip(expected) {
            assert!((g - e).abs() < 1e-15, "{g} vs {e}");
        }
    }

    #[test]
    fn all_orders_match_lagrange_and_moments() {
        for i in 1..=MAX_ORDER {
            let c = fd_coefficients(i).unwrap();
            assert_eq!(c.weights().len(), i + 1);
            for (g, e) in c.weights().iter().zip(lagrange_derivative_weights(i)) {
                assert!((g - e).abs() < 1e-12 * e.abs().max(1.0));
            }
            for r in c.moment_residuals() {
                assert!(r.abs() < 1e-12, "order {i}: residual {r}");
            }
            for (&(num, den), w) in c.exact_weights().iter().zip(c.weights()) {
                assert_eq!(num as f64 / den as f64, *w);
            }
        }
    }

    #[test]
    fn float_residuals_small_for_low_orders() {
        for i in 1..=6 {
            let c = fd_coefficients(i).unwrap();
            for r in c.float_moment_residuals() {
                assert!(r.abs() < 1e-12, "order {i}: float residual {r}");
            }
        }
    }

    #[test]
    fn reproduces_derivative_of_polynomials() {
        // f(x) = sum_k c_k x^k with degree <= i; weights applied to f(jh) give h f'(0).
        let h = 0.37;
        for i in 1..=MAX_ORDER {
            let c = fd_coefficients(i).unwrap();
            let coefs: Vec<f64> = (0..=i).map(|k| 0.3 + 0.7 * (k as f64).sin()).collect();
            let f = |x: f64| coefs.iter().rev().fold(0.0, |acc, ck| acc * x + ck);
            let samples: Vec<f64> = (0..=i).map(|j| f(j as f64 * h)).collect();
            let approx: f64 = c.weights().iter().zip(&samples).map(|(a, fj)| a * fj).sum();
            let scale = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((approx - coefs[1] * h).abs() <= 1e-10 * scale, "order {i}");
        }
    }

    #[test]
    fn out_of_range_orders_rejected() {
        assert_eq!(fd_coefficients(0), Err(Error::UnsupportedOrder(0)));
        assert_eq!(fd_coefficients(9), Err(Error::UnsupportedOrder(9)));
    }

    #[test]
    fn order_constants() {
        assert!((order_constant(&fd_coefficients(1).unwrap()) - 0.5).abs() < 1e-15);
        assert!((order_constant(&fd_coefficients(2).unwrap()) - 1.0).abs() < 1e-15);
        for i in 1..=MAX_ORDER {
            assert!(order_constant(&fd_coefficients(i).unwrap()) >= 0.0);
        }
    }

    #[test]
    fn pure_function() {
        for i in 1..=MAX_ORDER {
            let a = fd_coefficients(i).unwrap();
            let b = fd_coefficients(i).unwrap();
            let bits_a: Vec<u64> = a.weights().iter().map(|w| w.to_bits()).collect();
            let bits_b: Vec<u64> = b.weights().iter().map(|w| w.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }
}
