pub mod anf;
pub mod codec;
pub mod entropy;
mod error;
pub mod evalbench;
pub mod model;
pub mod motion;
pub mod nets;
pub mod rate;
pub mod synth;
pub mod training;
pub mod yuv;

pub use error::{Error, Result};

pub use model::{Model32, Model64, ModelConfig, VideoModel};
