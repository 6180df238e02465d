//! Dense n-dimensional arrays with a reverse-mode autodiff tape.
//!
//! The crate is generic over the scalar type through [`Scalar`], which is
//! implemented for `f32` and `f64`. Gradient verification and training both
//! run in `f64`; the `f32` instantiation exists for memory-bound inference.
//!
//! Beyond the usual elementwise/matmul/conv building blocks, the tape exposes
//! two primitives that need exact semantics rather than composition:
//!
//! * [`Var::straight_through`] — forward value is copied verbatim from the
//!   hard assignment while the gradient flows through the soft relaxation,
//! * [`Var::masked_softmax_rows`] — disallowed positions get exactly zero
//!   weight, so perturbing them can never change the output bits.

pub mod array;
pub mod checkpoint;
pub mod conv;
pub mod optim;
pub mod rng;
pub mod tape;

pub use array::NdArray;
pub use checkpoint::{load_params, save_params};
pub use conv::{avg_pool3d_raw, conv3d, conv3d_raw, upsample2x, ConvSpec};
pub use optim::{AdamW, Param, ParamStore};
pub use tape::{Gradients, Tape, Var};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};

/// Scalar element type for all array and tape math: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + std::iter::Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64`, used for constants and config values.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }

    /// Widening conversion used by serialization and reporting.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `f32`-backed array.
pub type Array32 = NdArray<f32>;
/// `f64`-backed array (the default precision of the tooling).
pub type Array64 = NdArray<f64>;
