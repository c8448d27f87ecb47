//! Scalar element trait: the engine runs on f32 for training and f64 for
//! gradient checking.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

pub trait Element:
    Float + LinalgScalar + ScalarOperand + AddAssign + Debug + Display + Sum + Send + Sync + 'static
{
    // Named to avoid clashing with num_traits' fallible casts.
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Element for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}
