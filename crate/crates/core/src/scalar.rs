//! Scalar abstraction shared by every numeric module.
//!
//! All filtering, policy and reward code is written once against [`Real`].
//! Plain floats (`f32`, `f64`) get it through a blanket impl over
//! [`num_traits::Float`]; the reverse-mode tape variable
//! [`crate::autodiff::Var`] implements it directly, which is how gradients
//! are obtained from the same code paths that run a backtest.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(v: f64) -> Self;

    /// Primal value, detached from any derivative information.
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;

    /// Gaussian CDF with standard deviation `scale`, evaluated at `self`.
    fn normal_cdf(self, scale: f64) -> Self;

    #[inline]
    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    #[inline]
    fn one() -> Self {
        Self::from_f64(1.0)
    }

    #[inline]
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }

    #[inline]
    fn powi2(self) -> Self {
        self * self
    }

    #[inline]
    fn is_finite(self) -> bool {
        self.value().is_finite()
    }

    /// `bias + Σ w_i x_i`. Tape scalars override this with a single n-ary node.
    fn affine(weights: &[Self], x: &[Self], bias: Self) -> Self {
        debug_assert_eq!(weights.len(), x.len());
        weights
            .iter()
            .zip(x)
            .fold(bias, |acc, (&w, &xi)| acc + w * xi)
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        Self::affine(a, b, Self::zero())
    }

    fn sum(xs: &[Self]) -> Self {
        xs.iter().fold(Self::zero(), |acc, &x| acc + x)
    }
}

/// Standard normal CDF via the complementary error function.
#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl<F> Real for F
where
    F: Float + FromPrimitive + ToPrimitive + Debug + AddAssign + SubAssign + MulAssign,
{
    #[inline]
    fn from_f64(v: f64) -> Self {
        F::from_f64(v).expect("f64 is representable in every float type")
    }

    #[inline]
    fn value(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    #[inline]
    fn exp(self) -> Self {
        Float::exp(self)
    }

    #[inline]
    fn ln(self) -> Self {
        Float::ln(self)
    }

    #[inline]
    fn sqrt(self) -> Self {
        Float::sqrt(self)
    }

    #[inline]
    fn tanh(self) -> Self {
        Float::tanh(self)
    }

    #[inline]
    fn abs(self) -> Self {
        Float::abs(self)
    }

    #[inline]
    fn normal_cdf(self, scale: f64) -> Self {
        <Self as Real>::from_f64(std_normal_cdf(self.value() / scale))
    }

    #[inline]
    fn is_finite(self) -> bool {
        Float::is_finite(self)
    }
}
