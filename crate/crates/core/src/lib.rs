//! Learned image codec with a hyperprior entropy model and dual-mode
//! decoding: one bitstream decodes either to a standard reconstruction or,
//! through decoder-side add-ons, to a denoised image.

pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod complexity;
pub mod config;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod lrm;
pub mod nn;
pub mod noise;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod stb;
pub mod synth;
pub mod training;
pub mod window;

pub use checkpoint::Codec;
pub use codec::{CodecModel, DecodeMode};
pub use config::ModelConfig;
pub use error::{Error, Result};
pub use imageio::ImageTensor;
pub use params::ParamStore;
