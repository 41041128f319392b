//! End-to-end inference: enhancement of WAV files, spectrogram images and
//! forward-pass latency measurement.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;

use crate::audio_io::{read_wav, write_wav, AudioClip};
use crate::error::{Error, Result};
use crate::model::{parse_checkpoint, ModelConfig, ModelParams, CHECKPOINT_MAGIC};
use crate::quantize::{
    parse_stored_model, quantize_model, quantized_forward, QuantizedModel, StoredModel,
    QUANTIZED_MAGIC,
};
use crate::stft::{istft_unstack, spectral_views, stft_stack, StackedSpectrogram, StftConfig};
use crate::synth::white_noise;

/// A model ready for inference on either arithmetic path.
#[derive(Debug, Clone, PartialEq)]
pub enum InferenceModel {
    Float(ModelParams<f32>),
    Int8(QuantizedModel),
}

impl InferenceModel {
    /// Reads either checkpoint format, chosen by magic.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.starts_with(CHECKPOINT_MAGIC) {
            return parse_checkpoint(bytes).map(Self::Float);
        }
        if bytes.starts_with(QUANTIZED_MAGIC) {
            return Ok(match parse_stored_model(bytes)? {
                StoredModel::Int8(q) => Self::Int8(q),
                StoredModel::Float(p) => Self::Float(p),
            });
        }
        Err(Error::BadMagic {
            expected: "ASE1 or ASEQ",
        })
    }

    /// The int8 version of this model (a no-op if it already is).
    pub fn quantized(self) -> Result<Self> {
        match self {
            Self::Float(p) => quantize_model(&p).map(Self::Int8),
            q => Ok(q),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::Float(p) => &p.config,
            Self::Int8(q) => &q.config,
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Self::Int8(_))
    }

    pub fn predict(&self, x: &Array3<f32>) -> Result<Array3<f32>> {
        match self {
            Self::Float(p) => p.predict(x),
            Self::Int8(q) => quantized_forward(q, x),
        }
    }
}

/// Runs the model once over the whole clip: STFT, per-clip normalization,
/// forward, denormalization, inverse STFT to the input length. Returns the
/// output and the forward-pass wall time in milliseconds.
pub fn enhance_clip(model: &InferenceModel, clip: &AudioClip, stft: &StftConfig) -> Result<(AudioClip, f64)> {
    let mut spec = stft_stack(clip, stft)?;
    let s = spec.norm_scale();
    spec.scale(1.0 / s);
    let x = spec.into_array();
    let start = Instant::now();
    let mut y = model.predict(&x)?;
    let forward_ms = start.elapsed().as_secs_f64() * 1e3;
    y.mapv_inplace(|v| v * s);
    let out = StackedSpectrogram::from_array(y)?;
    Ok((istft_unstack(&out, stft, clip.len(), clip.sample_rate())?, forward_ms))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnhanceRequest {
    pub input_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub output_path: PathBuf,
    /// Quantize a float checkpoint before inference.
    pub use_quantized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceReport {
    pub samples: usize,
    pub frames: usize,
    pub bins: usize,
    pub forward_ms: f64,
    pub quantized: bool,
}

pub fn enhance_file(req: &EnhanceRequest) -> Result<EnhanceReport> {
    let mut model = InferenceModel::load(&req.checkpoint_path)?;
    if req.use_quantized {
        model = model.quantized()?;
    }
    let clip = read_wav(&req.input_path)?;
    let stft = StftConfig::default();
    let (out, forward_ms) = enhance_clip(&model, &clip, &stft)?;
    write_wav(&out, &req.output_path)?;
    Ok(EnhanceReport {
        samples: clip.len(),
        frames: stft.frame_count(clip.len()),
        bins: stft.bins(),
        forward_ms,
        quantized: model.is_quantized(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrogramView {
    Magnitude,
    PowerDb,
    Phase,
}

impl std::str::FromStr for SpectrogramView {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "power_db" | "power" => Ok(Self::PowerDb),
            "phase" => Ok(Self::Phase),
            other => Err(Error::InvalidConfig(format!("unknown spectrogram view {other:?}"))),
        }
    }
}

impl std::fmt::Display for SpectrogramView {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Magnitude => "magnitude",
            Self::PowerDb => "power_db",
            Self::Phase => "phase",
        })
    }
}

/// Binary PGM of one view: width = frames, height = bins, bin 0 on the
/// bottom row. Values map linearly onto 0..=255 over the view's range
/// (`[-pi, pi]` for phase); a degenerate range maps to 0.
pub fn spectrogram_pgm(clip: &AudioClip, view: SpectrogramView, stft: &StftConfig) -> Result<Vec<u8>> {
    let views = spectral_views(&stft_stack(clip, stft)?);
    let data = match view {
        SpectrogramView::Magnitude => views.magnitude,
        SpectrogramView::PowerDb => views.power_db,
        SpectrogramView::Phase => views.phase,
    };
    let (frames, bins) = data.dim();
    let (lo, hi) = match view {
        SpectrogramView::Phase => (-std::f64::consts::PI, std::f64::consts::PI),
        _ => data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v as f64), hi.max(v as f64))
        }),
    };
    let span = hi - lo;
    let mut out = format!("P5\n{frames} {bins}\n255\n").into_bytes();
    out.reserve(frames * bins);
    for row in 0..bins {
        let b = bins - 1 - row;
        for f in 0..frames {
            let v = data[[f, b]] as f64;
            let px = if span > 0.0 {
                (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
            out.push(px);
        }
    }
    Ok(out)
}

pub fn emit_spectrogram_image(clip: &AudioClip, view: SpectrogramView, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = spectrogram_pgm(clip, view, &StftConfig::default())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub trials_ms: Vec<f64>,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    pub fn from_trials(trials_ms: Vec<f64>) -> Self {
        let mut sorted = trials_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let mean_ms = sorted.iter().sum::<f64>() / sorted.len() as f64;
        Self {
            mean_ms,
            p50_ms: percentile(&sorted, 0.50),
            p95_ms: percentile(&sorted, 0.95),
            trials_ms,
        }
    }
}

/// Linear interpolation between closest ranks of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times the forward pass of each model on `n_trials` seeded random clips
/// of `clip_len` samples. Models run interleaved on the same inputs after
/// one untimed warm-up each. STFT and normalization are not timed.
pub fn bench_latency(
    models: &[&InferenceModel],
    n_trials: usize,
    clip_len: usize,
    seed: u64,
) -> Result<Vec<LatencyStats>> {
    if n_trials < 3 {
        return Err(Error::InvalidConfig(format!("need at least 3 trials, got {n_trials}")));
    }
    let stft = StftConfig::default();
    let input = |trial: u64| -> Result<Array3<f32>> {
        let clip = white_noise(clip_len, 0.5, 22050, seed.wrapping_add(trial));
        let mut spec = stft_stack(&clip, &stft)?;
        spec.scale(1.0 / spec.norm_scale());
        Ok(spec.into_array())
    };
    let warm = input(u64::MAX)?;
    for m in models {
        m.predict(&warm)?;
    }
    let mut times = vec![Vec::with_capacity(n_trials); models.len()];
    for t in 0..n_trials {
        let x = input(t as u64)?;
        for (m, ts) in models.iter().zip(&mut times) {
            let start = Instant::now();
            m.predict(&x)?;
            ts.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(times.into_iter().map(LatencyStats::from_trials).collect())
}
