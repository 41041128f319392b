//! Integer-accumulate inference for [`QuantizedModel`].
//!
//! Every convolution quantizes its input activation tensor to int8 with a
//! per-tensor scale taken from the live max-abs, accumulates in `i32`, and
//! dequantizes by `input scale * weight scale`. PReLU and the skip path are
//! float. The latent depthwise outputs are kept as `i32` accumulators for
//! all channels so the second pointwise layer can see their global max.

use ndarray::Array3;
use rayon::prelude::*;

use super::{QuantizedBlock, QuantizedModel, QMAX};
use crate::error::{Error, Result};
use crate::model::conv::{depthwise_i8, pad_replicate_into, replicate_borders};
use crate::model::{count_forward_call, ModelConfig, CHANNEL_CHUNK, IO_CHANNELS};

thread_local! {
    /// Latent accumulator scratch, reused across calls on a thread. Every
    /// element is overwritten before it is read.
    static LATENT: std::cell::RefCell<Vec<i32>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Pixels per work item in the final pointwise reduction.
const PIXEL_TILE: usize = 4096;

fn act_scale(max_abs: f32) -> f32 {
    let s = max_abs / QMAX as f32;
    if s > 0.0 && s.is_finite() {
        s
    } else {
        1.0
    }
}

/// Nearest integer in `[-127, 127]`, ties away from zero. NaN maps to -127.
#[inline]
fn q(v: f32) -> i16 {
    let c = v.max(-127.0).min(127.0);
    // SAFETY: `c + 0.5 sign(c)` is finite with magnitude at most 127.5.
    unsafe { (c + 0.5f32.copysign(c)).to_int_unchecked::<i32>() as i16 }
}

fn max_abs(v: &[f32]) -> f32 {
    v.iter().fold(0.0f32, |m, x| m.max(x.abs()))
}

/// Convex hull vertices of the distinct `(a[i], b[i])` pairs.
fn pair_hull(a: &[i16], b: &[i16]) -> Vec<(i32, i32)> {
    const SIDE: usize = 256;
    let mut seen = vec![false; SIDE * SIDE];
    for (&u, &v) in a.iter().zip(b) {
        seen[(u as u8 as usize) * SIDE + v as u8 as usize] = true;
    }
    let mut pts: Vec<(i32, i32)> = seen
        .iter()
        .enumerate()
        .filter(|(_, &s)| s)
        .map(|(i, _)| ((i / SIDE) as u8 as i8 as i32, (i % SIDE) as u8 as i8 as i32))
        .collect();
    pts.sort_unstable();
    if pts.len() < 3 {
        return pts;
    }
    // Monotone chain.
    let cross = |o: (i32, i32), p: (i32, i32), q: (i32, i32)| {
        (p.0 - o.0) as i64 * (q.1 - o.1) as i64 - (p.1 - o.1) as i64 * (q.0 - o.0) as i64
    };
    let mut hull: Vec<(i32, i32)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &(i32, i32)>> =
            if pass == 0 { Box::new(pts.iter()) } else { Box::new(pts.iter().rev()) };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn chunk_ranges(latent: usize) -> Vec<std::ops::Range<usize>> {
    (0..latent)
        .step_by(CHANNEL_CHUNK)
        .map(|s| s..(s + CHANNEL_CHUNK).min(latent))
        .collect()
}

pub fn quantized_forward(qm: &QuantizedModel, x: &Array3<f32>) -> Result<Array3<f32>> {
    let sh = x.shape();
    if sh[0] != IO_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "expected {IO_CHANNELS} input planes, found {}",
            sh[0]
        )));
    }
    let k = qm.config.kernel_size;
    if sh[1] < k || sh[2] < k {
        return Err(Error::ShapeTooSmall {
            frames: sh[1],
            bins: sh[2],
            kernel: k,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    count_forward_call();
    let (rows, cols) = (sh[1], sh[2]);
    let mut h = x.as_standard_layout().into_owned();
    LATENT.with_borrow_mut(|latent| {
        let n = qm.config.latent_channels * rows * cols;
        if latent.len() < n {
            latent.resize(n, 0);
        }
        for block in &qm.blocks {
            h = block_forward(block, &qm.config, &h, rows, cols, &mut latent[..n]);
        }
    });
    Ok(h)
}

fn block_forward(
    b: &QuantizedBlock,
    cfg: &ModelConfig,
    x: &Array3<f32>,
    rows: usize,
    cols: usize,
    latent: &mut [i32],
) -> Array3<f32> {
    let plane = rows * cols;
    let k = cfg.kernel_size;
    let p = cfg.pad();
    let padded_len = (rows + 2 * p) * (cols + 2 * p);
    let xs = x.as_slice().expect("standard layout");

    // First depthwise layer.
    let sx = act_scale(max_abs(xs));
    let inv_x = 1.0 / sx;
    let mut d1 = vec![0.0f32; IO_CHANNELS * plane];
    {
        let mut qx = vec![0i16; plane];
        let mut padded = vec![0i16; padded_len];
        let mut acc = vec![0i32; plane];
        let m = sx * b.dw1.scale();
        for c in 0..IO_CHANNELS {
            for (d, &v) in qx.iter_mut().zip(&xs[c * plane..(c + 1) * plane]) {
                *d = q(v * inv_x);
            }
            pad_replicate_into(&qx, rows, cols, p, &mut padded);
            depthwise_i8(&padded, rows, cols, &b.dw1.values()[c * k * k..(c + 1) * k * k], k, &mut acc);
            for (d, &a) in d1[c * plane..(c + 1) * plane].iter_mut().zip(&acc) {
                *d = a as f32 * m;
            }
        }
    }

    // First pointwise layer input.
    let s_d1 = act_scale(max_abs(&d1));
    let inv_d1 = 1.0 / s_d1;
    let qd1: Vec<i16> = d1.iter().map(|&v| q(v * inv_d1)).collect();
    let (q0, q1) = qd1.split_at(plane);
    let m1 = s_d1 * b.pw1.scale();
    let pw1 = b.pw1.values();
    // Pre-activation of latent channel c: s = w0 q0 + w1 q1 fits i16
    // since |w q| <= 127^2; h = PReLU(s m1).

    let chunks = chunk_ranges(cfg.latent_channels);
    // Each pre-activation is linear in the pixel's (q0, q1) pair, so its
    // extremes over the plane sit on the convex hull of the distinct pairs.
    let hull = pair_hull(q0, q1);
    let max_h = (0..cfg.latent_channels)
        .map(|c| {
            let (w0, w1) = (pw1[c * IO_CHANNELS] as i32, pw1[c * IO_CHANNELS + 1] as i32);
            let (lo, hi) = hull
                .iter()
                .map(|&(u, v)| w0 * u + w1 * v)
                .fold((0, 0), |(lo, hi), s| (lo.min(s), hi.max(s)));
            // Same f32 operations as `preact`, which are monotone in s.
            let pos = hi as f32 * m1;
            let neg = (b.alpha[c] * (lo as f32 * m1)).abs();
            pos.max(neg)
        })
        .fold(0.0f32, f32::max);
    let s_h = act_scale(max_h);
    let inv_h = 1.0 / s_h;

    // Second depthwise layer, all channels kept as accumulators. The
    // quantized activation is written straight into the padded plane.
    let dw2 = b.dw2.values();
    let pc = cols + 2 * p;
    let max_acc = latent
        .par_chunks_mut(CHANNEL_CHUNK * plane)
        .zip(chunks.par_iter())
        .map(|(dst, range)| {
            let mut padded = vec![0i16; padded_len];
            let mut m = 0i32;
            for (slot, c) in dst.chunks_mut(plane).zip(range.clone()) {
                let (w0, w1) = (pw1[c * IO_CHANNELS] as i16, pw1[c * IO_CHANNELS + 1] as i16);
                let a = b.alpha[c];
                for r in 0..rows {
                    let row = &mut padded[(r + p) * pc + p..(r + p) * pc + p + cols];
                    let src = r * cols..(r + 1) * cols;
                    for ((d, &u), &v) in row.iter_mut().zip(&q0[src.clone()]).zip(&q1[src]) {
                        let s = w0.wrapping_mul(u).wrapping_add(w1.wrapping_mul(v));
                        let h = s as f32 * m1;
                        let h = if h >= 0.0 { h } else { a * h };
                        *d = q(h * inv_h);
                    }
                }
                replicate_borders(&mut padded, rows, cols, p);
                m = m.max(depthwise_i8(&padded, rows, cols, &dw2[c * k * k..(c + 1) * k * k], k, slot));
            }
            m
        })
        .reduce(|| 0, i32::max);

    // Second pointwise layer. d2 = acc * s_h * s_dw2 is requantized with
    // its own scale, i.e. q = acc * 127 / max_acc.
    let s_d2 = act_scale(max_acc as f32 * s_h * b.dw2.scale());
    let r = if max_acc > 0 { QMAX as f32 / max_acc as f32 } else { 0.0 };
    let m2 = s_d2 * b.pw2.scale();
    let pw2 = b.pw2.values();
    let latent_ch = cfg.latent_channels;
    let latent = &*latent;
    let mut out = x.clone();
    let os = out.as_slice_mut().expect("standard layout");
    let (out0, out1) = os.split_at_mut(plane);
    out0.par_chunks_mut(PIXEL_TILE)
        .zip(out1.par_chunks_mut(PIXEL_TILE))
        .enumerate()
        .for_each(|(t, (o0, o1))| {
            let start = t * PIXEL_TILE;
            let len = o0.len();
            let mut a0 = vec![0i32; len];
            let mut a1 = vec![0i32; len];
            let mut qd = vec![0i16; len];
            for c in 0..latent_ch {
                let src = &latent[c * plane + start..c * plane + start + len];
                for (d, &a) in qd.iter_mut().zip(src) {
                    *d = q(a as f32 * r);
                }
                let (w0, w1) = (pw2[c] as i16, pw2[latent_ch + c] as i16);
                for ((x0, x1), &v) in a0.iter_mut().zip(a1.iter_mut()).zip(&qd) {
                    *x0 = x0.wrapping_add(w0.wrapping_mul(v) as i32);
                    *x1 = x1.wrapping_add(w1.wrapping_mul(v) as i32);
                }
            }
            for (o, &a) in o0.iter_mut().zip(&a0) {
                *o += a as f32 * m2;
            }
            for (o, &a) in o1.iter_mut().zip(&a1) {
                *o += a as f32 * m2;
            }
        });
    out
}
