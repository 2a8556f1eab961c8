//! Scalar abstraction shared by the geometry, correction and evaluation code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real-valued coordinate type: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal or config value into `Self`.
    ///
    /// Panics only if the value is not representable, which cannot happen
    /// for the float types implementing this trait.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 value representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    #[inline]
    fn half() -> Self {
        Self::lit(0.5)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic sigmoid.
pub fn sigmoid<T: Scalar>(logit: T) -> T {
    if logit >= T::zero() {
        T::one() / (T::one() + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (T::one() + e)
    }
}

/// Inverse sigmoid with the probability clamped to `[1e-6, 1 - 1e-6]`.
pub fn logit<T: Scalar>(prob: T) -> T {
    let lo = T::lit(1e-6);
    let p = prob.max(lo).min(T::one() - lo);
    (p / (T::one() - p)).ln()
}

/// Rounds half away from zero, independent of platform rounding mode.
pub fn round_half_away(v: f64) -> f64 {
    v.round()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_logit_roundtrip() {
        for &p in &[0.01f64, 0.2, 0.5, 0.77, 0.999] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-9);
        }
        assert!(logit(0.0f64).is_finite());
        assert!(logit(1.0f64).is_finite());
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0f64) >= 0.0);
        assert!(sigmoid(800.0f64) <= 1.0);
    }

    #[test]
    fn rounding_is_half_away_from_zero() {
        assert_eq!(round_half_away(2.5), 3.0);
        assert_eq!(round_half_away(3.5), 4.0);
        assert_eq!(round_half_away(-2.5), -3.0);
        assert_eq!(round_half_away(2.4999), 2.0);
    }
}
