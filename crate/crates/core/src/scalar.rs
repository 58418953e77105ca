//! Scalar abstraction shared by the numeric modules.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps};

/// Floating point element type: `f32` for training and serving, `f64` for
/// gradient checks and oracle comparisons.
pub trait Scalar:
    Float + FromPrimitive + NumAssignOps + Sum + Send + Sync + Debug + Default + 'static
{
    /// Converts an `f64` literal or intermediate into this type.
    #[inline]
    fn cast(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every float type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
