//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real floating-point scalar the tensor, quantizer, adapter and search code
/// is generic over. Implemented for `f32` and `f64`; the crate-root aliases
/// fix it to `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Relative tolerance used by iterative kernels (Jacobi sweeps).
    const TOLERANCE: Self;

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize is representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar converts to f64")
    }

    /// Nearest value representable in single precision, so it survives a
    /// round trip through the 32-bit file formats unchanged.
    #[inline]
    fn round_to_f32(self) -> Self {
        Self::of(f64::from(self.as_f64() as f32))
    }
}

impl Scalar for f32 {
    const TOLERANCE: Self = 1e-7;
}

impl Scalar for f64 {
    const TOLERANCE: Self = 1e-15;
}
