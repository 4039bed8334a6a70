//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Training runs at `f32`; gradient and oracle checks run at `f64`. Anything
//! that satisfies [`Scalar`] can flow through the mask generator, the network
//! layers, the losses and the metrics.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal; every finite `f64` has a (possibly rounded)
    /// representation in the supported types.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize convertible to scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
