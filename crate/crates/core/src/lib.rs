//! Novelty detection with diffusion and consistency models.
//!
//! The crate trains small variance-exploding denoisers and consistency
//! models, projects images onto the learned data manifold, and scores
//! abnormality by how much an input moves under projection compared to how
//! much its own projection moves (Projection Regret).

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod consistency;
pub mod data;
pub mod diffusion;
pub mod distances;
pub mod error;
pub mod evaluation;
pub mod mock;
pub mod network;
pub mod optim;
pub mod projection;
pub mod rng;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Written into every output directory.
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));
