//! Minimal deterministic neural-network stack.
//!
//! Feature maps are `Array3<F>` in channel-major (C, H, W) layout. Every
//! operation has an explicit forward and backward; there is no tape. All
//! accumulation orders are fixed, so results are bit-identical across runs
//! on the same platform regardless of scheduling.
//!
//! The stack is generic over the scalar type: production training runs in
//! `f32`, while gradient checks instantiate the same code in `f64`.

pub mod adam;
pub mod conv;
pub mod ops;
pub mod param;

pub use adam::Adam;
pub use conv::Conv2d;
pub use param::{Grads, ParamId, ParamStore};

/// Scalar element type for network math.
pub trait Scalar: ndarray::NdFloat + num_traits::Float + Send + Sync {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}
