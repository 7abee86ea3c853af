//! Hypernetwork-conditioned sigmoid contrastive pre-training at desk scale.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod hypernet;
pub mod image_encoder;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod persist;
pub mod rng;
pub mod runs;
pub mod tensor;
pub mod text_encoder;
pub mod train;

pub use error::{Error, Result};
