use std::fmt::Debug;

/// Element type of tensors: f64 for tests/oracles (default), f32 as a
/// faster training option. Gradient-check tolerances require f64.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssign + Copy + Debug + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Gauss error function, used by the exact GELU.
    fn erf(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
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

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
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
