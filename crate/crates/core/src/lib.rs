pub mod data;
pub mod diffusion;
pub mod error;
pub mod files;
pub mod latents;
pub mod manifest;
pub mod metrics;
pub mod nnet;
pub mod pipeline;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
