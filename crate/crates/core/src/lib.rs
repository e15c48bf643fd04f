pub mod audio_io;
pub mod cli;
pub mod codec;
pub mod distortion;
pub mod dsp;
pub mod error;
pub mod evalbench;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
