//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`). Training runs in
//! `f32`; the same code instantiated at `f64` backs the finite-difference
//! gradient checks.

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use layers::{AttentionOutput, GruCell, Linear, MultiHeadAttention, MASK_BIAS};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
