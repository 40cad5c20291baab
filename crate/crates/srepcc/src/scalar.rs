//! Scalar abstraction for the numeric core.
//!
//! Feature storage is generic: `f32` in deployment (compact, and what the
//! bitstream contract is defined against), `f64` when validating gradients.
//! Accumulation is always `f64`; a `Scalar` only needs cheap conversion in
//! both directions. (`dbl`/`from_dbl` rather than `to_f64`/`from_f64` to stay
//! clear of the `num_traits` cast methods of the same names.)

pub trait Scalar: num_traits::Float + num_traits::NumAssign + Copy + std::fmt::Debug + Send + Sync + 'static {
    fn dbl(self) -> f64;
    fn from_dbl(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn dbl(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_dbl(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn dbl(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_dbl(v: f64) -> Self {
        v
    }
}
