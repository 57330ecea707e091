use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, NumCast};

/// Real scalar used by the quantization math and the dense reference paths.
pub trait Real:
    Float
    + FromPrimitive
    + NumCast
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 always casts to a float type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float always casts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Narrow to binary32, the width of the kernel-side table and accumulators.
pub fn to_f32<T: Real>(x: T) -> f32 {
    x.to_f32().unwrap_or(f32::NAN)
}
