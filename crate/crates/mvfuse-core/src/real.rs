//! Floating-point abstraction so the training path can run in single
//! precision while every verification path stays in double.

use ndarray::NdFloat;

/// Scalar type for embeddings, losses, and gradients.
///
/// Implemented for `f32` and `f64` only. All file formats stay `f64` on disk;
/// conversions happen at the trainer boundary.
pub trait Real: NdFloat + std::iter::Sum<Self> {
    /// Largest argument fed to `exp` by the hardness computation before
    /// clamping. Chosen per type so the clamped value is still finite.
    const EXP_CLAMP: Self;

    /// Short name used in reports and manifests.
    const PRECISION_NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f64 {
    const EXP_CLAMP: Self = 700.0;
    const PRECISION_NAME: &'static str = "double";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const EXP_CLAMP: Self = 80.0;
    const PRECISION_NAME: &'static str = "single";

    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}
