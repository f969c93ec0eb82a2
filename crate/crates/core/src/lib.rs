//! Continuous diffusion language modeling at desk scale.

pub mod denoiser;
pub mod checkpoint;
pub mod control;
pub mod corpus;
pub mod diffusion;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod mbr;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use autodiff::Tensor;
pub use error::{DiffLmError, Result};
