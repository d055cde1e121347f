//! Scalar abstraction shared by every numerical module.
//!
//! All of the dynamics, control and certification code is written against
//! [`Real`], which is implemented for `f32`, `f64` and the reverse-mode
//! [`Var`](crate::autodiff::Var) used by the identification module.

use nalgebra::Scalar;
use std::fmt::Debug;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point scalar usable by the generic core.
pub trait Real:
    Scalar
    + Copy
    + Debug
    + Default
    + num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("f64 literal is representable")
    }

    /// Plain value of the scalar, dropping any derivative information.
    #[inline]
    fn value(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
