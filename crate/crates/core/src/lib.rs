//! Reconstruction of high-frequency content in low-bitrate mono audio.
//!
//! Audio is analyzed with an STFT, stacked into real/imaginary planes, and
//! passed once through a residual stack of depthwise-separable
//! convolutional autoencoder blocks. The crate covers dataset preparation,
//! training with analytic gradients, int8 post-training quantization, and
//! objective evaluation (SNR, LSD, STOI).

pub mod audio_io;
pub mod config;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod quantize;
pub mod scalar;
pub mod stft;
pub mod synth;
pub mod train;

pub use audio_io::AudioClip;
pub use error::{Error, ErrorClass, Result};
pub use model::{ModelConfig, ModelParams};
pub use stft::{StackedSpectrogram, StftConfig};
