//! The scalar abstraction all numeric kernels are generic over.
//!
//! Everything numeric in this crate (tensors, layers, training, evaluation)
//! is written against [`Scalar`] so the same code instantiates at `f32` or
//! `f64`. The crate root exports `f64` aliases, which is what the training
//! harness and CLI use: gradient checking against central finite differences
//! needs the head-room of double precision.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps, NumCast};

/// Floating-point element type of a [`Tensor`](crate::tensor::Tensor).
///
/// Implemented automatically for every type satisfying the bounds;
/// in practice that is `f32` and `f64`.
pub trait Scalar:
    Float + NumAssignOps + NumCast + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, for constants and parsed data.
    fn from_f64(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 -> Scalar conversion")
    }

    /// Lossy conversion to `f64`, for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar -> f64 conversion")
    }

    fn from_usize(x: usize) -> Self {
        <Self as NumCast>::from(x).expect("usize -> Scalar conversion")
    }
}

impl<T> Scalar for T where
    T: Float + NumAssignOps + NumCast + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_generic<F: Scalar>(xs: &[F]) -> F {
        xs.iter().copied().sum()
    }

    #[test]
    fn instantiates_for_both_widths() {
        assert_eq!(sum_generic(&[1.0f32, 2.0, 3.0]), 6.0f32);
        assert_eq!(sum_generic(&[1.0f64, 2.0, 3.0]), 6.0f64);
        assert_eq!(f64::from_f64(0.5).as_f64(), 0.5);
    }
}
