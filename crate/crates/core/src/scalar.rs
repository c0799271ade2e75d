//! Scalar abstraction shared by the primal (`f64`) and forward-mode (`Dual`) code paths.
//!
//! Every loss and gradient routine on the inner training path is generic over [`Real`].
//! Instantiating it with [`Dual`] yields the directional derivative of the whole
//! analytic gradient, which is exactly the Hessian-vector product needed to
//! reverse-propagate trajectory matching through an unrolled student rollout.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::Result;
use crate::linalg::{jacobi_eigh, Mat};

/// Eigen-decomposition of a small symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymEig<T> {
    pub values: Vec<T>,
    /// `vectors[j]` is the unit eigenvector paired with `values[j]`.
    pub vectors: Vec<Vec<T>>,
}

pub trait Real:
    Copy
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    fn from_f64(v: f64) -> Self;
    /// Primal part.
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln_1p(self) -> Self;
    /// Symmetric eigendecomposition, eigenvalues sorted descending.
    fn sym_eig(a: &Mat<Self>) -> Result<SymEig<Self>>;

    #[inline]
    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn is_finite(self) -> bool {
        self.re().is_finite()
    }

    /// `ln(1 + e^x)` without overflow.
    fn softplus(self) -> Self {
        if self.re() > 0.0 {
            self + (-self).exp().ln_1p()
        } else {
            self.exp().ln_1p()
        }
    }

    fn sigmoid(self) -> Self {
        if self.re() >= 0.0 {
            Self::one() / (Self::one() + (-self).exp())
        } else {
            let e = self.exp();
            e / (Self::one() + e)
        }
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn ln_1p(self) -> Self {
        f64::ln_1p(self)
    }

    fn sym_eig(a: &Mat<f64>) -> Result<SymEig<f64>> {
        jacobi_eigh(a)
    }
}

/// First-order forward-mode dual number `re + eps·ε`, `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub const fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }

    pub const fn constant(re: f64) -> Self {
        Self { re, eps: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.re;
        Dual::new(self.re * inv, (self.eps * o.re - self.re * o.eps) * inv * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl DivAssign for Dual {
    #[inline]
    fn div_assign(&mut self, o: Dual) {
        *self = *self / o;
    }
}

impl Sum for Dual {
    fn sum<I: Iterator<Item = Dual>>(iter: I) -> Dual {
        iter.fold(Dual::default(), |a, b| a + b)
    }
}

impl Real for Dual {
    #[inline]
    fn from_f64(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps / (2.0 * s))
    }
    #[inline]
    fn ln_1p(self) -> Self {
        Dual::new(self.re.ln_1p(), self.eps / (1.0 + self.re))
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }

    /// Primal eigenpairs from the Jacobi solver; tangents from first-order
    /// perturbation theory: `λ̇ₗ = uₗᵀȦuₗ`, `u̇ₗ = Σ_{j≠l} uⱼ (uⱼᵀȦuₗ)/(λₗ−λⱼ)`.
    /// Pairs closer than the resolvable gap contribute no rotation.
    fn sym_eig(a: &Mat<Dual>) -> Result<SymEig<Dual>> {
        let n = a.rows();
        let primal = a.map(|x| x.re);
        let tangent = a.map(|x| x.eps);
        let base = jacobi_eigh(&primal)?;
        let scale = base.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let proj: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let au = tangent.matvec(&base.vectors[j]);
                (0..n).map(|i| dot(&base.vectors[i], &au)).collect()
            })
            .collect();
        // proj[l][j] = u_jᵀ Ȧ u_l
        let mut values = Vec::with_capacity(n);
        let mut vectors = Vec::with_capacity(n);
        for l in 0..n {
            values.push(Dual::new(base.values[l], proj[l][l]));
            let mut dv = vec![0.0; n];
            for j in 0..n {
                if j == l {
                    continue;
                }
                let gap = base.values[l] - base.values[j];
                if gap.abs() <= 1e-13 * scale {
                    continue;
                }
                let c = proj[l][j] / gap;
                for (d, u) in dv.iter_mut().zip(&base.vectors[j]) {
                    *d += c * u;
                }
            }
            vectors.push(
                base.vectors[l]
                    .iter()
                    .zip(&dv)
                    .map(|(&u, &d)| Dual::new(u, d))
                    .collect(),
            );
        }
        Ok(SymEig { values, vectors })
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Lift a primal slice into constant duals.
pub fn lift(v: &[f64]) -> Vec<Dual> {
    v.iter().map(|&x| Dual::constant(x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn dual_elementary_derivatives() {
        let x = 0.7;
        let d = Dual::new(x, 1.0);
        assert!((d.exp().eps - fd(f64::exp, x)).abs() < 1e-8);
        assert!((d.ln().eps - fd(f64::ln, x)).abs() < 1e-8);
        assert!((d.sqrt().eps - fd(f64::sqrt, x)).abs() < 1e-8);
        assert!((d.softplus().eps - fd(|t| t.softplus(), x)).abs() < 1e-8);
        assert!(((-d).sigmoid().eps - fd(|t| (-t).sigmoid(), x)).abs() < 1e-8);
        let q = (d * d + Dual::constant(1.0)) / (d - Dual::constant(3.0));
        let fq = |t: f64| (t * t + 1.0) / (t - 3.0);
        assert!((q.eps - fd(fq, x)).abs() < 1e-7);
    }

    #[test]
    fn softplus_is_stable_at_extremes() {
        assert!((800.0f64.softplus() - 800.0).abs() < 1e-12);
        assert!((-800.0f64).softplus() >= 0.0);
        assert!((0.0f64.softplus() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(1000.0f64.sigmoid(), 1.0);
        assert_eq!((-1000.0f64).sigmoid(), 0.0);
    }

    #[test]
    fn dual_eigen_tangent_matches_finite_differences() {
        let a0 = [[2.0, 0.3, -0.1], [0.3, 1.0, 0.4], [-0.1, 0.4, 0.2]];
        let da = [[0.1, -0.2, 0.05], [-0.2, 0.3, 0.0], [0.05, 0.0, -0.4]];
        let build = |t: f64| {
            Mat::from_fn(3, 3, |i, j| a0[i][j] + t * da[i][j])
        };
        let dual = Mat::from_fn(3, 3, |i, j| Dual::new(a0[i][j], da[i][j]));
        let e = Dual::sym_eig(&dual).unwrap();
        let h = 1e-6;
        let ep = f64::sym_eig(&build(h)).unwrap();
        let em = f64::sym_eig(&build(-h)).unwrap();
        for l in 0..3 {
            let dl = (ep.values[l] - em.values[l]) / (2.0 * h);
            assert!((e.values[l].eps - dl).abs() < 1e-7);
            // align signs of the perturbed eigenvectors to the base one
            let sp = dot(&ep.vectors[l], &e.vectors[l].iter().map(|d| d.re).collect::<Vec<_>>()).signum();
            let sm = dot(&em.vectors[l], &e.vectors[l].iter().map(|d| d.re).collect::<Vec<_>>()).signum();
            for i in 0..3 {
                let du = (sp * ep.vectors[l][i] - sm * em.vectors[l][i]) / (2.0 * h);
                assert!((e.vectors[l][i].eps - du).abs() < 1e-6, "l={l} i={i}");
            }
        }
    }
}
