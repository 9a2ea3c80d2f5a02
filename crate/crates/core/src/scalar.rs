use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, NumCast, ToPrimitive};
pub use twofloat::TwoFloat;

/// Floating-point scalar the optimizers and problems are generic over:
/// `f32`, `f64`, or the double-double [`TwoFloat`] (about 32 significant
/// digits) for checks that must not see `f64` rounding.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal or sample into this scalar type.
    fn lit(x: f64) -> Self {
        <Self as NumCast>::from(x).expect("f64 is representable in every supported scalar type")
    }

    /// Unit roundoff of the type's arithmetic.
    fn eps() -> Self {
        Self::epsilon()
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
impl Scalar for TwoFloat {
    // `Float::epsilon` is the smallest positive value for this type
    fn eps() -> Self {
        <TwoFloat as From<f64>>::from(2f64.powi(-104))
    }
}
