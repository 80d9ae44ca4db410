pub mod config;
pub mod dpl;
pub mod drivers;
pub mod env;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod policy;
pub mod ppo;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};

/// Parameters of a trained model; training runs in `f32`.
pub type Store32 = socialdrive_nn::ParamStore<f32>;
/// The `f64` instantiation used by gradient checks.
pub type Store64 = socialdrive_nn::ParamStore<f64>;
pub type GaussianLatent32 = dpl::GaussianLatent<f32>;
pub type GaussianLatent64 = dpl::GaussianLatent<f64>;
