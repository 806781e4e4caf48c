//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training and inference run in `f32`; the same code instantiated at `f64`
//! is what the gradient checks and reference comparisons use.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal or hyperparameter into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        // Every Float implementor accepts any finite f64 (possibly rounded).
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
