//! Short-time Fourier analysis with real/imaginary plane stacking, and the
//! least-squares overlap-add inverse.

use std::f64::consts::PI;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use realfft::num_complex::Complex;
use realfft::RealFftPlanner;

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

/// Overlap-add denominators at or below this are treated as uncovered.
pub const OLA_EPSILON: f32 = 1e-8;
/// Floor added to squared magnitude before taking decibels.
pub const POWER_EPSILON: f32 = 1e-10;
/// Lower bound of the per-clip normalization scale.
pub const NORM_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_length: usize,
    pub hop: usize,
    /// FFT size. The window is zero-padded at the tail up to this length.
    pub frame_length: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_length: 1023,
            hop: 248,
            frame_length: 1024,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_length < 2 || self.frame_length < 2 || self.hop == 0 {
            return Err(Error::InvalidConfig("degenerate STFT sizes".into()));
        }
        if self.window_length > self.frame_length {
            return Err(Error::InvalidConfig(
                "window_length exceeds frame_length".into(),
            ));
        }
        if self.hop > self.window_length {
            return Err(Error::InvalidConfig(
                "hop exceeds window_length; overlap-add would leave gaps".into(),
            ));
        }
        if self.frame_length % 2 != 0 {
            return Err(Error::InvalidConfig("frame_length must be even".into()));
        }
        Ok(())
    }

    /// Bins kept per frame (the Nyquist bin is dropped).
    pub fn bins(&self) -> usize {
        self.frame_length / 2
    }

    /// Number of full frames that fit in `num_samples`, or 0.
    pub fn frame_count(&self, num_samples: usize) -> usize {
        if num_samples < self.frame_length {
            0
        } else {
            (num_samples - self.frame_length) / self.hop + 1
        }
    }

    /// Analysis window of `frame_length` taps: symmetric Hann over
    /// `window_length`, then zeros.
    pub fn window(&self) -> Vec<f64> {
        let mut w = hann(self.window_length);
        w.resize(self.frame_length, 0.0);
        w
    }
}

/// Symmetric Hann: `0.5 * (1 - cos(2*pi*n / (len - 1)))`.
pub fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / denom).cos()))
        .collect()
}

/// A `[2, frames, bins]` tensor; plane 0 holds real parts, plane 1 imaginary.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedSpectrogram {
    data: Array3<f32>,
}

impl StackedSpectrogram {
    pub fn from_array(data: Array3<f32>) -> Result<Self> {
        if data.shape()[0] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "expected 2 planes, found {}",
                data.shape()[0]
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            data: Array3::zeros((2, frames, bins)),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn shape(&self) -> [usize; 3] {
        [2, self.frames(), self.bins()]
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_array(self) -> Array3<f32> {
        self.data
    }

    pub fn real(&self) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), 0)
    }

    pub fn imag(&self) -> ArrayView2<'_, f32> {
        self.data.index_axis(Axis(0), 1)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Per-clip normalization scale: max-abs over both planes, floored at
    /// [`NORM_FLOOR`].
    pub fn norm_scale(&self) -> f32 {
        self.max_abs().max(NORM_FLOOR)
    }

    pub fn scale(&mut self, factor: f32) {
        self.data.mapv_inplace(|v| v * factor);
    }
}

/// Forward transform: frame `t` covers `[t*hop, t*hop + frame_length)`.
pub fn stft_stack(clip: &AudioClip, cfg: &StftConfig) -> Result<StackedSpectrogram> {
    cfg.validate()?;
    let x = clip.samples();
    let frames = cfg.frame_count(x.len());
    if frames == 0 {
        return Err(Error::ClipTooShort {
            len: x.len(),
            required: cfg.frame_length,
        });
    }
    let n = cfg.frame_length;
    let bins = cfg.bins();
    let window: Vec<f32> = cfg.window().into_iter().map(|w| w as f32).collect();
    let fft = RealFftPlanner::<f32>::new().plan_fft_forward(n);

    let mut data = Array3::<f32>::zeros((2, frames, bins));
    let rows: Vec<Vec<Complex<f32>>> = (0..frames)
        .into_par_iter()
        .map_init(
            || (fft.make_input_vec(), fft.make_output_vec(), fft.make_scratch_vec()),
            |(input, output, scratch), t| {
                let start = t * cfg.hop;
                for ((dst, &s), &w) in input.iter_mut().zip(&x[start..start + n]).zip(&window) {
                    *dst = s * w;
                }
                fft.process_with_scratch(input, output, scratch)
                    .expect("buffer sizes come from the plan");
                output[..bins].to_vec()
            },
        )
        .collect();
    for (t, row) in rows.iter().enumerate() {
        for (k, c) in row.iter().enumerate() {
            data[[0, t, k]] = c.re;
            data[[1, t, k]] = c.im;
        }
    }
    StackedSpectrogram::from_array(data)
}

/// Inverse transform by window-squared normalized overlap-add, truncated
/// or zero-padded to `out_len` samples.
pub fn istft_unstack(
    spec: &StackedSpectrogram,
    cfg: &StftConfig,
    out_len: usize,
    sample_rate: u32,
) -> Result<AudioClip> {
    cfg.validate()?;
    let bins = cfg.bins();
    if spec.bins() != bins {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram has {} bins, config expects {bins}",
            spec.bins()
        )));
    }
    let n = cfg.frame_length;
    let frames = spec.frames();
    let window = cfg.window();
    let ifft = RealFftPlanner::<f32>::new().plan_fft_inverse(n);
    let inv_n = 1.0 / n as f32;

    let data = spec.data();
    let time_frames: Vec<Vec<f32>> = (0..frames)
        .into_par_iter()
        .map_init(
            || (ifft.make_input_vec(), ifft.make_output_vec(), ifft.make_scratch_vec()),
            |(input, output, scratch), t| {
                for (k, c) in input.iter_mut().enumerate() {
                    *c = if k < bins {
                        Complex::new(data[[0, t, k]], data[[1, t, k]])
                    } else {
                        Complex::new(0.0, 0.0)
                    };
                }
                // A real signal has a purely real DC term.
                input[0].im = 0.0;
                ifft.process_with_scratch(input, output, scratch)
                    .expect("DC and Nyquist are real");
                output.iter().map(|v| v * inv_n).collect()
            },
        )
        .collect();

    let span = if frames == 0 {
        0
    } else {
        (frames - 1) * cfg.hop + n
    };
    let mut num = vec![0.0f64; span];
    let mut den = vec![0.0f64; span];
    for (t, frame) in time_frames.iter().enumerate() {
        let start = t * cfg.hop;
        for (j, (&v, &w)) in frame.iter().zip(&window).enumerate() {
            num[start + j] += w * v as f64;
            den[start + j] += w * w;
        }
    }
    let mut out = vec![0.0f32; out_len];
    for (i, o) in out.iter_mut().enumerate().take(span) {
        if den[i] > OLA_EPSILON as f64 {
            *o = (num[i] / den[i]) as f32;
        }
    }
    AudioClip::new(out, sample_rate)
}

/// Magnitude, power in decibels, and phase in `(-pi, pi]`, each `[frames, bins]`.
#[derive(Debug, Clone)]
pub struct SpectralViews {
    pub magnitude: Array2<f32>,
    pub power_db: Array2<f32>,
    pub phase: Array2<f32>,
}

pub fn spectral_views(spec: &StackedSpectrogram) -> SpectralViews {
    let re = spec.real();
    let im = spec.imag();
    let magnitude = ndarray::Zip::from(&re)
        .and(&im)
        .map_collect(|&r, &i| r.hypot(i));
    let power_db = magnitude.mapv(|m| 10.0 * (m * m + POWER_EPSILON).log10());
    let phase = ndarray::Zip::from(&re).and(&im).map_collect(|&r, &i| {
        let p = i.atan2(r);
        if p <= -std::f32::consts::PI {
            std::f32::consts::PI
        } else {
            p
        }
    });
    SpectralViews {
        magnitude,
        power_db,
        phase,
    }
}

/// Copy of frames `[start, start + len)`.
pub fn frame_slice(spec: &StackedSpectrogram, start: usize, len: usize) -> StackedSpectrogram {
    StackedSpectrogram {
        data: spec.data.slice(s![.., start..start + len, ..]).to_owned(),
    }
}
