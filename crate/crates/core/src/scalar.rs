//! Scalar abstractions.
//!
//! [`Element`] is the ring-like bound the differentiation graph needs for
//! its structural operations (matmul, conv, products, sums, relu) and for
//! the whole backward pass. Exact types such as `Ratio<i64>` satisfy it, so
//! algebraic identities can be checked without rounding.
//!
//! [`Real`] adds the transcendental functions needed by log-softmax,
//! logarithms, likelihoods and sampling. Implemented for `f32` and `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, Num, ToPrimitive};

pub trait Element: Copy + Num + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static {
    /// Converts a count, used for means and normalizers.
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }
}

impl<T> Element for T where T: Copy + Num + PartialOrd + FromPrimitive + Debug + Send + Sync + 'static
{}

pub trait Real: Element + Float + ToPrimitive + Display + Sum {
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}
