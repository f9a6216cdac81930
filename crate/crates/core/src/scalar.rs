//! Element type abstraction: f32 for normal runs, f64 for gradient checks.

use num_traits::Float;

/// Scalar element of a [`crate::tensor::Tensor`].
///
/// Finite-difference checks at eps = 1e-3 need f64; everything else runs
/// in f32. Both types share one code path through this trait.
pub trait Scalar:
    Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function (exact GELU needs it).
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}
