//! Seeded synthetic signals for smoke training, benchmarks and tests.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio_io::AudioClip;

/// Sum of `partials` sinusoids with random frequencies in
/// `[20 Hz, max_hz]`, random phases and amplitudes, scaled to `peak`.
pub fn random_tones(len: usize, sample_rate: u32, max_hz: f64, partials: usize, peak: f64, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let tones: Vec<(f64, f64, f64)> = (0..partials)
        .map(|_| {
            (
                rng.random_range(20.0..max_hz),
                rng.random_range(0.0..2.0 * PI),
                rng.random_range(0.1..1.0),
            )
        })
        .collect();
    let x: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            tones.iter().map(|(f, ph, a)| a * (2.0 * PI * f * t + ph).sin()).sum()
        })
        .collect();
    normalize(x, peak, sample_rate)
}

/// Random harmonic tone: a fundamental in `[80, 600]` Hz with harmonics up
/// to 0.9 of Nyquist, amplitudes falling off as `1/k`, and a slow random
/// amplitude envelope.
pub fn harmonic_signal(len: usize, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let f0 = rng.random_range(80.0..600.0);
    let max_hz = 0.45 * sr;
    let harmonics: Vec<(f64, f64, f64)> = (1..)
        .map(|k| k as f64 * f0)
        .take_while(|&f| f < max_hz)
        .enumerate()
        .map(|(i, f)| {
            let amp = rng.random_range(0.3..1.0) / (i + 1) as f64;
            (f, rng.random_range(0.0..2.0 * PI), amp)
        })
        .collect();
    let env_hz = rng.random_range(0.5..4.0);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let x: Vec<f64> = (0..len)
        .map(|n| {
            let t = n as f64 / sr;
            let env = 0.6 + 0.4 * (2.0 * PI * env_hz * t + env_phase).sin();
            env * harmonics
                .iter()
                .map(|(f, ph, a)| a * (2.0 * PI * f * t + ph).sin())
                .sum::<f64>()
        })
        .collect();
    normalize(x, 0.8, sample_rate)
}

/// Zero-phase windowed-sinc low-pass with `taps` (odd) coefficients.
pub fn low_pass(clip: &AudioClip, cutoff_hz: f64, taps: usize) -> AudioClip {
    let taps = taps | 1;
    let half = (taps / 2) as isize;
    let fc = cutoff_hz / clip.sample_rate() as f64;
    let h: Vec<f64> = (-half..=half)
        .map(|n| {
            let n = n as f64;
            let sinc = if n == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * n).sin() / (PI * n)
            };
            let w = 0.5 * (1.0 + (PI * n / (half as f64 + 1.0)).cos());
            sinc * w
        })
        .collect();
    let gain: f64 = h.iter().sum();
    let x = clip.samples();
    let len = x.len() as isize;
    let y: Vec<f32> = (0..len)
        .map(|i| {
            let mut acc = 0.0;
            for (k, &c) in h.iter().enumerate() {
                let j = i + k as isize - half;
                if (0..len).contains(&j) {
                    acc += c * x[j as usize] as f64;
                }
            }
            (acc / gain) as f32
        })
        .collect();
    AudioClip::new(y, clip.sample_rate()).expect("rate already valid")
}

/// A `(degraded, reference)` pair: a harmonic signal and its low-passed copy.
pub fn training_pair(len: usize, sample_rate: u32, cutoff_hz: f64, seed: u64) -> (AudioClip, AudioClip) {
    let reference = harmonic_signal(len, sample_rate, seed);
    let degraded = low_pass(&reference, cutoff_hz, 101);
    (degraded, reference)
}

/// Uniform white noise in `[-amp, amp]`.
pub fn white_noise(len: usize, amp: f32, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    AudioClip::new(
        (0..len).map(|_| rng.random_range(-amp..=amp)).collect(),
        sample_rate,
    )
    .expect("valid rate")
}

/// Noise with a speech-like long-term spectrum and syllabic modulation:
/// white noise through two cascaded one-pole low-passes at 800 Hz, a
/// first-difference boost above 2 kHz, and a 4 Hz raised-sine envelope.
pub fn speech_shaped_noise(len: usize, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = sample_rate as f64;
    let a = (-2.0 * PI * 800.0 / sr).exp();
    let (mut s1, mut s2, mut prev) = (0.0f64, 0.0f64, 0.0f64);
    let phase = rng.random_range(0.0..2.0 * PI);
    let x: Vec<f64> = (0..len)
        .map(|n| {
            let w: f64 = rng.random_range(-1.0..1.0);
            s1 = a * s1 + (1.0 - a) * w;
            s2 = a * s2 + (1.0 - a) * s1;
            let hi = w - prev;
            prev = w;
            let env = 0.2 + 0.8 * (2.0 * PI * 2.0 * n as f64 / sr + phase).sin().abs();
            env * (s2 + 0.05 * hi)
        })
        .collect();
    normalize(x, 0.5, sample_rate)
}

fn normalize(x: Vec<f64>, peak: f64, sample_rate: u32) -> AudioClip {
    let max = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if max > 0.0 { peak / max } else { 0.0 };
    AudioClip::new(x.into_iter().map(|v| (v * g) as f32).collect(), sample_rate)
        .expect("valid rate")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_bounded() {
        let a = harmonic_signal(4000, 22050, 3);
        let b = harmonic_signal(4000, 22050, 3);
        assert_eq!(a, b);
        let peak = a.samples().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!((peak - 0.8).abs() < 1e-6);
    }

    #[test]
    fn low_pass_attenuates_high_tone() {
        let sr = 22050;
        let hi = random_tones(8000, sr, 9000.0, 1, 0.5, 1);
        // Force a known high tone.
        let tone: Vec<f32> = (0..8000)
            .map(|n| (0.5 * (2.0 * PI * 8000.0 * n as f64 / sr as f64).sin()) as f32)
            .collect();
        let tone = AudioClip::new(tone, sr).unwrap();
        let filtered = low_pass(&tone, 3000.0, 101);
        let rms = |c: &AudioClip| {
            (c.samples()[200..7800].iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / 7600.0).sqrt()
        };
        assert!(rms(&filtered) < 0.01 * rms(&tone));
        assert_eq!(hi.len(), 8000);
    }
}
