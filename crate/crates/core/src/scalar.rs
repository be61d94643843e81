//! Scalar types that probability masses can be stored in.
//!
//! Measures and convolution tables are generic over [`Scalar`] so the same
//! dynamic program runs in `f64`, `f32`, or exact rational arithmetic. The
//! rational mode anchors the error bars of the floating-point pipeline.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Num, ToPrimitive};

pub trait Scalar: Num + Clone + Debug + PartialOrd + Send + Sync + 'static {
    /// Conversion from a double. Exact for rational scalars (every finite
    /// double is a dyadic rational).
    fn of_f64(x: f64) -> Self;

    fn as_f64(&self) -> f64;

    /// Whether arithmetic in this type is exact.
    fn is_exact() -> bool {
        false
    }

    /// Tolerance used when checking normalizations such as "masses sum to 1".
    fn tolerance() -> f64;

    fn from_ratio(num: i64, den: i64) -> Self {
        Self::of_f64(num as f64) / Self::of_f64(den as f64)
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }

    fn as_f64(&self) -> f64 {
        *self
    }

    fn tolerance() -> f64 {
        1e-12
    }
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(&self) -> f64 {
        *self as f64
    }

    fn tolerance() -> f64 {
        1e-5
    }
}

impl Scalar for BigRational {
    fn of_f64(x: f64) -> Self {
        BigRational::from_float(x).expect("finite probability mass")
    }

    fn as_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }

    fn is_exact() -> bool {
        true
    }

    fn tolerance() -> f64 {
        0.0
    }

    fn from_ratio(num: i64, den: i64) -> Self {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_conversion_is_exact() {
        let third = BigRational::from_ratio(1, 3);
        let sum = third.clone() + third.clone() + third;
        assert_eq!(sum, BigRational::of_f64(1.0));
        assert_eq!(BigRational::of_f64(0.125).as_f64(), 0.125);
    }

    #[test]
    fn float_ratio() {
        assert!((f64::from_ratio(1, 4) - 0.25).abs() < 1e-16);
        assert!((f32::from_ratio(1, 8) - 0.125).abs() < 1e-7);
    }
}
