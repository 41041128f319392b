//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use ase_core::AudioClip;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prints one status line and returns `ok`. Writes to stderr directly so the
/// line shows up even when the harness captures test output.
pub fn report(name: &str, ok: bool, detail: impl std::fmt::Display) -> bool {
    use std::io::Write;
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    ok
}

/// Samples on the 16-bit grid, so scaling by small integers is exact in f32.
pub fn grid_noise(len: usize, amp: f64, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = (amp * 32768.0) as i32;
    let s = (0..len)
        .map(|_| rng.random_range(-q..=q) as f32 / 32768.0)
        .collect();
    AudioClip::new(s, 22050).unwrap()
}

/// Energy ratio by plain left-to-right summation, in dB.
pub fn oracle_snr(y: &[f32], y_hat: &[f32]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for i in 0..y.len() {
        let a = y[i] as f64;
        let d = a - y_hat[i] as f64;
        num += a * a;
        den += d * d;
    }
    10.0 * num.log10() - 10.0 * den.log10()
}

/// Log-spectral distance by direct DFT: periodic Hann 2048, hop 512, all
/// 1025 one-sided bins, `log10(|X|^2 + 1e-10)`.
pub fn oracle_lsd(y: &[f32], y_hat: &[f32]) -> f64 {
    const N: usize = 2048;
    const HOP: usize = 512;
    let cos: Vec<f64> = (0..N).map(|i| (2.0 * PI * i as f64 / N as f64).cos()).collect();
    let sin: Vec<f64> = (0..N).map(|i| (2.0 * PI * i as f64 / N as f64).sin()).collect();
    // Periodic Hann via the table: 0.5 - 0.5 cos(2 pi n / N).
    let win: Vec<f64> = (0..N).map(|n| 0.5 - 0.5 * cos[n]).collect();
    let spectrum = |x: &[f32]| -> Vec<f64> {
        let frame: Vec<f64> = x.iter().zip(&win).map(|(&v, w)| v as f64 * w).collect();
        (0..=N / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in frame.iter().enumerate() {
                    let idx = (k * n) % N;
                    re += v * cos[idx];
                    im -= v * sin[idx];
                }
                (re * re + im * im + 1e-10).log10()
            })
            .collect()
    };
    let frames = (y.len() - N) / HOP + 1;
    let mut total = 0.0;
    for t in 0..frames {
        let a = spectrum(&y[t * HOP..t * HOP + N]);
        let b = spectrum(&y_hat[t * HOP..t * HOP + N]);
        let ms: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / a.len() as f64;
        total += ms.sqrt();
    }
    total / frames as f64
}

/// SNR over samples at least `margin` away from either end, in dB.
pub fn interior_snr(x: &[f32], y: &[f32], margin: usize) -> f64 {
    let (mut s, mut e) = (0.0f64, 0.0f64);
    for i in margin..x.len() - margin {
        s += (x[i] as f64).powi(2);
        e += (x[i] as f64 - y[i] as f64).powi(2);
    }
    10.0 * (s / e.max(1e-30)).log10()
}

/// `max |analytic - numeric| / max |numeric|`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Central difference of `f` in coordinate `i` of `x` with step `h`.
pub fn central_diff(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}
