//! Unified pixel-level OCR.
//!
//! A single hierarchical windowed-attention encoder-decoder translates RGB
//! images to RGB images for three tasks: text removal, text segmentation and
//! tampered-text detection. The task is selected by adding a learnable prompt
//! vector to the encoder's final feature map.

pub mod analysis;
pub mod checkpoint;
pub mod codec;
pub mod config;
mod error;
pub mod imageops;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod train;

pub use codec::TaskId;
pub use config::{ModelConfig, PromptSite, StageSpec};
pub use error::{Error, Result};
pub use model::{Model, ModelOutput};
