pub mod cli;
pub mod diffusion;
pub mod error;
pub mod harmonizer;
pub mod idvae;
pub mod instrument;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod perception;
pub mod pipeline;
pub mod raster;
pub mod recomposer;

pub use error::{Error, Result};
pub use raster::ImageTensor;
