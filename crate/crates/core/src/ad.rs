//! Forward-mode automatic differentiation.
//!
//! Every numerical kernel in the crate (vector fields, Jacobians, flow maps,
//! constraint residuals) is written once against the [`Scalar`] trait and then
//! evaluated either with plain `f64` or with a [`Dual`] number carrying `N`
//! tangent directions. Constraint Jacobians are assembled from local blocks in
//! chunks of [`CHUNK`] directions, see [`jacobian_local`].

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Number of tangent directions carried per dual pass.
pub const CHUNK: usize = 16;

/// Real scalar usable by the generic numerical kernels.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;

    /// Apply a scalar function whose value `f` and derivative `df` at
    /// `self.value()` were computed externally.
    fn chain(self, f: f64, df: f64) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn powi(self, n: i32) -> Self {
        let mut acc = Self::cst(1.0);
        let base = if n < 0 { Self::cst(1.0) / self } else { self };
        for _ in 0..n.unsigned_abs() {
            acc = acc * base;
        }
        acc
    }

    fn is_finite(&self) -> bool {
        self.value().is_finite()
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn chain(self, f: f64, _df: f64) -> Self {
        f
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
}

/// Dual number `re + Σ eps[i]·εᵢ` with `εᵢ·εⱼ = 0`.
#[derive(Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> fmt::Debug for Dual<N> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dual({}, {:?})", self.re, &self.eps[..])
    }
}

impl<const N: usize> Dual<N> {
    pub fn constant(re: f64) -> Self {
        Self { re, eps: [0.0; N] }
    }

    /// Seed direction `dir` with unit tangent.
    pub fn variable(re: f64, dir: usize) -> Self {
        let mut eps = [0.0; N];
        if dir < N {
            eps[dir] = 1.0;
        }
        Self { re, eps }
    }

    #[inline]
    fn scale_eps(&self, k: f64) -> [f64; N] {
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = self.eps[i] * k;
        }
        out
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        self.re += rhs.re;
        for i in 0..N {
            self.eps[i] += rhs.eps[i];
        }
        self
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        self.re -= rhs.re;
        for i in 0..N {
            self.eps[i] -= rhs.eps[i];
        }
        self
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * rhs.re + self.re * rhs.eps[i];
        }
        Self { re: self.re * rhs.re, eps }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let inv = 1.0 / rhs.re;
        let re = self.re * inv;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - re * rhs.eps[i]) * inv;
        }
        Self { re, eps }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { re: -self.re, eps: self.scale_eps(-1.0) }
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: f64) -> Self {
        self.re += rhs;
        self
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: f64) -> Self {
        self.re -= rhs;
        self
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        Self { re: self.re * rhs, eps: self.scale_eps(rhs) }
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self * (1.0 / rhs)
    }
}

impl<const N: usize> AddAssign for Dual<N> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl<const N: usize> SubAssign for Dual<N> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl<const N: usize> MulAssign for Dual<N> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl<const N: usize> Scalar for Dual<N> {
    #[inline]
    fn cst(v: f64) -> Self {
        Self::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.re
    }
    fn sqrt(self) -> Self {
        let r = self.re.sqrt();
        self.chain(r, 0.5 / r)
    }
    fn sin(self) -> Self {
        self.chain(self.re.sin(), self.re.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.re.cos(), -self.re.sin())
    }
    #[inline]
    fn chain(self, f: f64, df: f64) -> Self {
        Self { re: f, eps: self.scale_eps(df) }
    }
}

/// Dense Jacobian of `f: Rⁿ → Rᵐ` at `x`, by forward mode in chunks of
/// [`CHUNK`] directions. Returns `(f(x), J)` with `J` row-major `m × n`.
///
/// `f` must be written generically so the same code runs on `Dual<CHUNK>`.
pub fn jacobian_local<F, E>(x: &[f64], f: F) -> Result<(Vec<f64>, Vec<Vec<f64>>), E>
where
    F: Fn(&[Dual<CHUNK>]) -> Result<Vec<Dual<CHUNK>>, E>,
{
    let n = x.len();
    let mut values: Vec<f64> = Vec::new();
    let mut jac: Vec<Vec<f64>> = Vec::new();
    let mut start = 0;
    loop {
        let seeded: Vec<Dual<CHUNK>> = x
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                if i >= start && i < start + CHUNK {
                    Dual::variable(xi, i - start)
                } else {
                    Dual::constant(xi)
                }
            })
            .collect();
        let out = f(&seeded)?;
        if jac.is_empty() {
            values = out.iter().map(|d| d.re).collect();
            jac = vec![vec![0.0; n]; out.len()];
        }
        for (r, d) in out.iter().enumerate() {
            for k in 0..CHUNK.min(n.saturating_sub(start)) {
                jac[r][start + k] = d.eps[k];
            }
        }
        start += CHUNK;
        if start >= n {
            break;
        }
    }
    Ok((values, jac))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly<S: Scalar>(x: &[S]) -> Result<Vec<S>, ()> {
        Ok(vec![x[0] * x[0] * x[1] + x[1].sin(), (x[0] / x[1]).sqrt(), x[0].powi(3)])
    }

    #[test]
    fn product_and_quotient_rules() {
        let a = Dual::<2>::variable(3.0, 0);
        let b = Dual::<2>::variable(2.0, 1);
        let p = a * b;
        assert_eq!(p.re, 6.0);
        assert_eq!(p.eps, [2.0, 3.0]);
        let q = a / b;
        assert_eq!(q.eps, [0.5, -0.75]);
    }

    #[test]
    fn chunked_jacobian_matches_hand_derivatives() {
        let x = [1.3, 0.7];
        let (v, j) = jacobian_local(&x, |s| poly(s)).unwrap();
        assert!((v[0] - (1.3f64 * 1.3 * 0.7 + 0.7f64.sin())).abs() < 1e-15);
        assert!((j[0][0] - 2.0 * 1.3 * 0.7).abs() < 1e-14);
        assert!((j[0][1] - (1.3 * 1.3 + 0.7f64.cos())).abs() < 1e-14);
        let r = (1.3f64 / 0.7).sqrt();
        assert!((j[1][0] - 0.5 / r / 0.7).abs() < 1e-14);
        assert!((j[2][0] - 3.0 * 1.3 * 1.3).abs() < 1e-13);
        assert_eq!(j[2][1], 0.0);
    }

    #[test]
    fn more_inputs_than_one_chunk() {
        let x: Vec<f64> = (0..40).map(|i| 0.1 * i as f64 + 1.0).collect();
        let (_, j) = jacobian_local(&x, |s: &[Dual<CHUNK>]| -> Result<Vec<Dual<CHUNK>>, ()> {
            let mut acc = Dual::constant(0.0);
            for (i, xi) in s.iter().enumerate() {
                acc += *xi * *xi * (i as f64);
            }
            Ok(vec![acc])
        })
        .unwrap();
        for i in 0..40 {
            assert!((j[0][i] - 2.0 * x[i] * i as f64).abs() < 1e-12);
        }
    }
}
