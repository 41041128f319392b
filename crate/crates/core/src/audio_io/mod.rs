//! Mono PCM audio: WAV I/O, segmentation, and training-pair preparation.

mod dataset;
mod wav;

pub use dataset::{
    prepare_dataset, trim_to_common_length, DatasetManifest, ManifestEntry, PrepareOptions,
    Split, DEFAULT_ENCODER_TEMPLATE,
};
pub(crate) use dataset::load_pair;
pub use wav::{decode_wav, encode_wav, read_wav, write_wav};

use crate::error::{Error, Result};

/// Mono PCM audio with samples in `[-1.0, 1.0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, clamping every sample into `[-1, 1]`. Non-finite
    /// samples become 0.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidConfig("sample rate must be positive".into()));
        }
        let samples = samples
            .into_iter()
            .map(|s| if s.is_finite() { s.clamp(-1.0, 1.0) } else { 0.0 })
            .collect();
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    /// Sub-range `[start, start + len)` as a new clip.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.samples.len())
            .ok_or(Error::ClipTooShort {
                len: self.samples.len(),
                required: start.saturating_add(len),
            })?;
        Ok(Self {
            samples: self.samples[start..end].to_vec(),
            sample_rate: self.sample_rate,
        })
    }

    /// Centered window of `len` samples; the whole clip if it is shorter.
    pub fn center_crop(&self, len: usize) -> Self {
        if self.samples.len() <= len {
            return self.clone();
        }
        let start = (self.samples.len() - len) / 2;
        Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Cuts a clip into `parts` contiguous segments of `len / parts` samples.
/// Remainder samples at the tail are dropped.
pub fn split_clip(clip: &AudioClip, parts: usize) -> Result<Vec<AudioClip>> {
    if parts == 0 || clip.len() < parts {
        return Err(Error::EmptyClip);
    }
    let seg = clip.len() / parts;
    Ok(clip
        .samples
        .chunks_exact(seg)
        .take(parts)
        .map(|c| AudioClip {
            samples: c.to_vec(),
            sample_rate: clip.sample_rate,
        })
        .collect())
}
