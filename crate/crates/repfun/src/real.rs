use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type the numeric code is generic over.
///
/// `RealField` brings the elementary functions and lets nalgebra's
/// factorizations (QR, LU, SVD, symmetric eigen) work unchanged; the
/// num-traits bounds give checked conversions from literals and usize.
pub trait Real: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy {}

impl<T> Real for T where T: nalgebra::RealField + FromPrimitive + ToPrimitive + Copy {}

/// Shorthand for embedding an `f64` constant into the scalar type.
///
/// Only used with literals and small integer-valued values, which every
/// supported scalar represents; hence the expect.
pub(crate) fn cst<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("constant not representable in scalar type")
}

/// Embeds a usize (dimension count, group size) into the scalar type.
pub(crate) fn cnt<T: Real>(n: usize) -> T {
    T::from_usize(n).expect("count not representable in scalar type")
}
