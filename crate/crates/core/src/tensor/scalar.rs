use num_traits::{Float, FromPrimitive};

/// Element type for tensors. f32 is the training dtype; f64 exists so
/// gradient checks can run at a precision where finite differences are
/// trustworthy.
pub trait Scalar:
    Float + FromPrimitive + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Default + 'static
{
    fn of_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
}
