pub mod ablate;
pub mod augment;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod garment;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod objective;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod triplet;
pub mod unet;

pub use error::{Error, Result};
