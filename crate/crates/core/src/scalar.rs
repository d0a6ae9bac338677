//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All model, loss and metric code is written against [`Scalar`] so the same
//! implementation runs in `f32` for training and in `f64` for gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from a literal or an `f64` computation.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// Large negative value added to attention scores of masked keys.
    fn mask_value() -> Self {
        Self::of(-1e9)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_value_underflows_softmax() {
        assert_eq!((f32::mask_value()).exp(), 0.0);
        assert_eq!((f64::mask_value()).exp(), 0.0);
    }

    #[test]
    fn round_trips_through_f64() {
        assert_eq!(f32::of(0.25).as_f64(), 0.25);
        assert_eq!(f64::of(1e-9), 1e-9);
    }
}
