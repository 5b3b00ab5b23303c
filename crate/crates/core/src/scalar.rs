//! Scalar abstraction shared by the geometric and camera modules.

use std::fmt::Debug;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating point type usable by the generic geometry: `f32` or `f64`.
///
/// Method resolution goes through nalgebra's `RealField`/`ComplexField`;
/// `num_traits::Float` is deliberately not a supertrait since it would make
/// `sqrt`, `abs` and friends ambiguous.
pub trait Real: RealField + Copy + FromPrimitive + ToPrimitive + Default + Debug {
    /// Converts an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Tolerance used for "numerically zero" decisions, never tighter than the
    /// type's own resolution allows.
    #[inline]
    fn tolerance(requested: f64) -> Self {
        let floor = Self::default_epsilon() * Self::lit(16.0);
        let t = Self::lit(requested);
        if t > floor {
            t
        } else {
            floor
        }
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Casts between scalar types, going through `f64`.
#[inline]
pub fn cast<A: Real, B: Real>(v: A) -> B {
    B::lit(v.to_f64_lossy())
}
