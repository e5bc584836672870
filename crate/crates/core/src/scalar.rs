//! Scalar abstraction for the numeric engine.
//!
//! Everything numeric in the crate is generic over [`Scalar`] so the same
//! code runs in f32 (the production precision of the lab) and in f64 (used
//! by the finite-difference oracles, where cancellation in single precision
//! would drown the signal). Concrete aliases live at the crate root.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Copy + Debug + Display + 'static
{
    /// Lossless-enough conversion from f64 literals and accumulators.
    fn from_f64c(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    /// Widen to f64 for reporting and accumulation.
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
