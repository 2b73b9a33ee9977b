use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// Element type of every tensor in the crate.
///
/// The whole stack is generic over this trait; `f64` is used for tests and
/// the CLI so finite-difference tolerances are meaningful, `f32` is available
/// for lighter release builds.
pub trait Scalar:
    Float + NumAssignOps + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
}

macro_rules! impl_scalar {
    ($($t:ty)*) => {$(
        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self { v as $t }
            #[inline]
            fn into_f64(self) -> f64 { self as f64 }
        }
    )*};
}

impl_scalar!(f32 f64);

/// Shorthand used all over the kernels to lift literals into `T`.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}
