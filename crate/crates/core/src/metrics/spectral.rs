//! SNR and log-spectral distance.

use std::f64::consts::PI;

use realfft::RealFftPlanner;

use crate::audio_io::AudioClip;
use crate::error::{Error, Result};

/// Returned when the error energy is below [`SNR_FLOOR`].
pub const SNR_CAP_DB: f64 = 100.0;
pub const SNR_FLOOR: f64 = 1e-20;

pub const LSD_WINDOW: usize = 2048;
pub const LSD_HOP: usize = 512;
pub const LSD_EPSILON: f64 = 1e-10;

fn same_len(a: &AudioClip, b: &AudioClip) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// `10 log10(|y|^2 / |y - y_hat|^2)` in dB, capped at [`SNR_CAP_DB`].
pub fn snr(y: &AudioClip, y_hat: &AudioClip) -> Result<f64> {
    same_len(y, y_hat)?;
    let (mut sig, mut err) = (0.0f64, 0.0f64);
    for (&a, &b) in y.samples().iter().zip(y_hat.samples()) {
        let (a, b) = (a as f64, b as f64);
        sig += a * a;
        err += (a - b) * (a - b);
    }
    if sig == 0.0 {
        return Err(Error::SilentReference);
    }
    if err < SNR_FLOOR {
        return Ok(SNR_CAP_DB);
    }
    Ok(10.0 * (sig / err).log10())
}

/// Periodic Hann of length `n`.
pub(crate) fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// `log10(|X|^2 + eps)` per frame and one-sided bin.
fn log_power(x: &[f32]) -> Vec<Vec<f64>> {
    let n = LSD_WINDOW;
    let w = periodic_hann(n);
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(n);
    let (mut input, mut output) = (fft.make_input_vec(), fft.make_output_vec());
    let frames = (x.len() - n) / LSD_HOP + 1;
    (0..frames)
        .map(|t| {
            let frame = &x[t * LSD_HOP..t * LSD_HOP + n];
            for ((d, &s), &wv) in input.iter_mut().zip(frame).zip(&w) {
                *d = s as f64 * wv;
            }
            fft.process(&mut input, &mut output).expect("plan sizes");
            output.iter().map(|c| (c.norm_sqr() + LSD_EPSILON).log10()).collect()
        })
        .collect()
}

/// Mean over frames of the RMS (over one-sided bins) difference of
/// `log10` power spectra. Window 2048, hop 512, no centering.
pub fn lsd(y: &AudioClip, y_hat: &AudioClip) -> Result<f64> {
    same_len(y, y_hat)?;
    if y.len() < LSD_WINDOW {
        return Err(Error::TooShort(format!(
            "LSD needs {LSD_WINDOW} samples, got {}",
            y.len()
        )));
    }
    let a = log_power(y.samples());
    let b = log_power(y_hat.samples());
    let total: f64 = a
        .iter()
        .zip(&b)
        .map(|(fa, fb)| {
            let k = fa.len() as f64;
            (fa.iter().zip(fb).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / k).sqrt()
        })
        .sum();
    Ok(total / a.len() as f64)
}
