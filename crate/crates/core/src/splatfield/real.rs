use nalgebra::RealField;

/// Scalar type of the renderer: `f32` for training and serving, `f64` for
/// gradient checks.
pub trait Real: RealField + Copy + Default + Send + Sync + 'static {
    fn lit(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
