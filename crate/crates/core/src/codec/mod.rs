//! Learned watermark embedder and extractor operating on STFT magnitudes.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod message;
pub mod model;

pub use config::{BlockPattern, ModelConfig};
pub use layers::{Binder, Part};
pub use message::Message;
pub use model::{broadcast, CodecModel, EmbedTrace, MacCounts, ParamCounts};
