//! Floating-point abstraction for the numeric kernels.
//!
//! Everything in this crate is written against [`Scalar`] so the same code
//! runs in `f32` or `f64`; the crate-root aliases fix `f64` as the default.

use num_traits::{Float, FromPrimitive};

/// Scalar type of all grids, fields and solver state: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + std::fmt::LowerExp
    + Send
    + Sync
    + 'static
{
    /// Lift an `f64` constant into the scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable in scalar type")
    }

    /// Lift a count into the scalar type.
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("count not representable in scalar type")
    }

    fn two() -> Self {
        Self::of(2.0)
    }

    fn half() -> Self {
        Self::of(0.5)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + std::ops::AddAssign
        + std::ops::SubAssign
        + std::ops::MulAssign
        + std::iter::Sum
        + std::fmt::Debug
        + std::fmt::Display
        + std::fmt::LowerExp
        + Send
        + Sync
        + 'static
{
}

/// Trapezoidal quadrature of uniformly spaced samples.
pub fn trapezoid<T: Scalar>(values: &[T], dx: T) -> T {
    debug_assert!(values.len() >= 2);
    let inner: T = values[1..values.len() - 1].iter().copied().sum();
    dx * (T::half() * (values[0] + values[values.len() - 1]) + inner)
}

/// Trapezoidal quadrature of the product of two sample vectors.
pub fn trapezoid_product<T: Scalar>(a: &[T], b: &[T], dx: T) -> T {
    debug_assert_eq!(a.len(), b.len());
    let last = a.len() - 1;
    let mut acc = T::half() * (a[0] * b[0] + a[last] * b[last]);
    for i in 1..last {
        acc += a[i] * b[i];
    }
    dx * acc
}
