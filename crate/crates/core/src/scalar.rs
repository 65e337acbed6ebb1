//! Scalar abstraction shared by the geometry, lifting and field code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Floating point type the numeric core is generic over: `f32` or `f64`.
///
/// Geometry and evaluation run in `f64`; training is usually run in `f32`
/// for throughput, with `f64` reserved for gradient checking.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Never fails for `f32`/`f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite real")
    }

    /// Zero for subnormal values, which are very slow in matrix kernels.
    #[inline]
    fn flush(self) -> Self {
        if self.abs() < Self::min_positive_value() {
            Self::zero()
        } else {
            self
        }
    }

    /// `ln(1 + x)` for `x ≥ 0` via `ln(u)·x/(u − 1)` with `u = 1 + x`, which
    /// keeps full precision and is much cheaper than the libm routine.
    #[inline]
    fn ln_1p_nonneg(self) -> Self {
        let u = Self::one() + self;
        let d = u - Self::one();
        if d == Self::zero() {
            self
        } else {
            u.ln() * (self / d)
        }
    }

    /// Numerically stable `ln(1 + e^x)`, subnormal results flushed to zero.
    #[inline]
    fn softplus(self) -> Self {
        let zero = Self::zero();
        (self.max(zero) + (-self.abs()).exp().ln_1p_nonneg()).flush()
    }

    /// `(softplus(x), sigmoid(x))` sharing one exponential.
    #[inline]
    fn softplus_with_slope(self) -> (Self, Self) {
        let one = Self::one();
        let e = (-self.abs()).exp();
        let sp = self.max(Self::zero()) + e.ln_1p_nonneg();
        let slope = if self >= Self::zero() { one / (one + e) } else { e / (one + e) };
        (sp.flush(), slope.flush())
    }

    /// Logistic function `1 / (1 + e^-x)`, stable for large `|x|`.
    /// Subnormal results are flushed to zero.
    #[inline]
    fn sigmoid(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            (e / (one + e)).flush()
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// In-place softmax over a slice of logits.
pub fn softmax_in_place<T: Real>(logits: &mut [T]) {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut sum = T::zero();
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for x in [-20.0f64, -1.0, 0.0, 0.5, 3.0, 30.0] {
            let naive = (1.0 + x.exp()).ln();
            assert!((x.softplus() - naive).abs() < 1e-12);
        }
        assert!((1000.0f64).softplus().is_finite());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(0.0f64.sigmoid(), 0.5);
        assert!((-800.0f64).sigmoid() >= 0.0);
        assert!((800.0f64).sigmoid() <= 1.0);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4]), 1);
    }
}
