//! Forecasting the evolution of dynamic 3D Gaussian-splat scenes.
//!
//! Past Gaussian-parameter trajectories are encoded by a Transformer into a
//! latent initial state, evolved by a learned autonomous ODE, and decoded
//! back to Gaussian parameters that can be rasterized at any future time.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`); the aliases at
//! the crate root fix the 64-bit instantiation used by default.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod forecaster;
pub mod interp;
pub mod nn;
pub mod ode;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod sampling;
pub mod scalar;
pub mod scene;
pub mod tensor;
pub mod training;
pub mod trajectory;

pub use autodiff::{Gradients, Tape, Var};
pub use checkpoint::{ParamId, ParamStore, Session};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
