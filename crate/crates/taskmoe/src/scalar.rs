//! Scalar abstraction for the numeric core.
//!
//! Tensor math, the tape, the optimizer and the statistics helpers are
//! generic over [`Scalar`]. Concrete runs use the `f64` aliases exported
//! from the crate root; `f32` is available for callers that want it.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

/// Floating-point scalar usable inside tensors and on the tape.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Sum + Send + Sync + 'static
{
    /// Draw a standard-normal sample.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// Draw a uniform sample from the open interval (0, 1).
    fn uniform_open01<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }
}

macro_rules! impl_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                // Box-Muller on two open-interval uniforms.
                let u1: $t = Self::uniform_open01(rng);
                let u2: $t = Self::uniform_open01(rng);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI as $t * u2).cos()
            }
            fn uniform_open01<R: Rng + ?Sized>(rng: &mut R) -> Self {
                loop {
                    let u: $t = rng.gen();
                    if u > 0.0 && u < 1.0 {
                        return u;
                    }
                }
            }
        }
    )*};
}

impl_scalar!(f32, f64);
