//! Scalar abstraction shared by the numerical modules.
//!
//! Everything that evaluates densities or probabilities is generic over
//! [`Real`], which is implemented for `f32` and `f64`. The crate root exposes
//! `f64` aliases for the common case.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point scalar used throughout the crate.
pub trait Real:
    Float + FloatConst + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Natural log of the gamma function for positive arguments.
    fn lgamma(self) -> Self;

    /// Lossy conversion from `f64`. Every value the crate converts is representable.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is convertible to every Real")
    }

    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize is convertible to every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real is convertible to f64")
    }
}

impl Real for f64 {
    #[inline]
    fn lgamma(self) -> Self {
        libm::lgamma(self)
    }
}

impl Real for f32 {
    #[inline]
    fn lgamma(self) -> Self {
        libm::lgammaf(self)
    }
}

/// `log(exp(a) + exp(b))` without overflow.
#[inline]
pub fn log_add_exp<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log(sum(exp(x)))` over a slice; `-inf` for an empty slice.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let sum: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Neumaier-compensated sum; keeps the log-likelihood of large data sets
/// accurate enough that EM's monotonicity is visible below 1e-9.
pub fn compensated_sum<T: Real>(xs: impl IntoIterator<Item = T>) -> T {
    let mut sum = T::zero();
    let mut carry = T::zero();
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            carry = carry + ((sum - t) + x);
        } else {
            carry = carry + ((x - t) + sum);
        }
        sum = t;
    }
    sum + carry
}

/// `log(k!)` for small non-negative integers.
pub fn ln_factorial<T: Real>(k: usize) -> T {
    T::of_usize(k + 1).lgamma()
}
