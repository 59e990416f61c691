//! Floating-point scalar abstraction shared by the toy model, pooling and the trainer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// A real scalar the toy transformer can run in: `f32` for speed, `f64` for
/// gradient verification.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every supported scalar")
    }

    #[inline]
    fn wide(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    /// Little-endian 32-bit encoding used by checkpoints.
    #[inline]
    fn to_le_f32_bytes(self) -> [u8; 4] {
        (self.wide() as f32).to_le_bytes()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
