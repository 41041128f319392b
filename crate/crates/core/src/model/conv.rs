//! Single-plane depthwise convolution kernels on row-major buffers.
//!
//! Inputs are replicate-padded by `k / 2` on every border, so a `k x k`
//! kernel at stride 1 preserves the plane shape. The padded buffer has
//! `(rows + 2p) x (cols + 2p)` elements.

use crate::scalar::Scalar;

/// Dot product with eight interleaved partial sums, so the loop vectorizes.
/// The summation order is fixed by the slice length alone.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().fold(T::zero(), |s, &v| s + v) + tail
}

/// Writes the replicate-padded copy of `src` into `dst`.
pub(crate) fn pad_replicate_into<T: Copy>(src: &[T], rows: usize, cols: usize, p: usize, dst: &mut [T]) {
    let pc = cols + 2 * p;
    debug_assert_eq!(dst.len(), (rows + 2 * p) * pc);
    for pr in 0..rows + 2 * p {
        let r = pr.saturating_sub(p).min(rows - 1);
        let src_row = &src[r * cols..(r + 1) * cols];
        let dst_row = &mut dst[pr * pc..(pr + 1) * pc];
        let (left, rest) = dst_row.split_at_mut(p);
        let (mid, right) = rest.split_at_mut(cols);
        left.fill(src_row[0]);
        mid.copy_from_slice(src_row);
        right.fill(src_row[cols - 1]);
    }
}

/// Fills the border of a padded plane whose interior is already written.
pub(crate) fn replicate_borders<T: Copy>(dst: &mut [T], rows: usize, cols: usize, p: usize) {
    let pc = cols + 2 * p;
    for r in p..rows + p {
        let row = &mut dst[r * pc..(r + 1) * pc];
        let (first, last) = (row[p], row[p + cols - 1]);
        row[..p].fill(first);
        row[p + cols..].fill(last);
    }
    for r in 0..p {
        dst.copy_within(p * pc..(p + 1) * pc, r * pc);
        let last = rows + p - 1;
        dst.copy_within(last * pc..(last + 1) * pc, (last + 1 + r) * pc);
    }
}

pub(crate) fn pad_replicate<T: Copy + Default>(src: &[T], rows: usize, cols: usize, p: usize) -> Vec<T> {
    let mut dst = vec![T::default(); (rows + 2 * p) * (cols + 2 * p)];
    pad_replicate_into(src, rows, cols, p, &mut dst);
    dst
}

/// Adjoint of [`pad_replicate_into`]: accumulates a padded-plane gradient
/// back onto the unpadded plane.
pub(crate) fn fold_padding_into<T: Scalar>(gp: &[T], rows: usize, cols: usize, p: usize, dst: &mut [T]) {
    let pc = cols + 2 * p;
    for pr in 0..rows + 2 * p {
        let r = pr.saturating_sub(p).min(rows - 1);
        let g_row = &gp[pr * pc..(pr + 1) * pc];
        let dst_row = &mut dst[r * cols..(r + 1) * cols];
        for (d, &g) in dst_row.iter_mut().zip(&g_row[p..p + cols]) {
            *d += g;
        }
        for &g in &g_row[..p] {
            dst_row[0] += g;
        }
        for &g in &g_row[p + cols..] {
            dst_row[cols - 1] += g;
        }
    }
}

/// `out[f, b] = sum_{i,j} kernel[i, j] * padded[f + i, b + j]`.
pub(crate) fn depthwise<T: Scalar>(padded: &[T], rows: usize, cols: usize, kernel: &[T], k: usize, out: &mut [T]) {
    let pc = cols + k - 1;
    for f in 0..rows {
        let out_row = &mut out[f * cols..(f + 1) * cols];
        out_row.fill(T::zero());
        for i in 0..k {
            let prow = &padded[(f + i) * pc..(f + i + 1) * pc];
            for j in 0..k {
                let w = kernel[i * k + j];
                for (o, &v) in out_row.iter_mut().zip(&prow[j..j + cols]) {
                    *o += w * v;
                }
            }
        }
    }
}

/// Gradient of [`depthwise`] with respect to its padded input.
pub(crate) fn depthwise_input_grad<T: Scalar>(g_out: &[T], rows: usize, cols: usize, kernel: &[T], k: usize, gp: &mut [T]) {
    let pc = cols + k - 1;
    gp.fill(T::zero());
    for f in 0..rows {
        let g_row = &g_out[f * cols..(f + 1) * cols];
        for i in 0..k {
            let gp_row = &mut gp[(f + i) * pc..(f + i + 1) * pc];
            for j in 0..k {
                let w = kernel[i * k + j];
                for (d, &g) in gp_row[j..j + cols].iter_mut().zip(g_row) {
                    *d += w * g;
                }
            }
        }
    }
}

/// Gradient of [`depthwise`] with respect to its kernel, accumulated into `gk`.
pub(crate) fn depthwise_kernel_grad<T: Scalar>(g_out: &[T], padded: &[T], rows: usize, cols: usize, k: usize, gk: &mut [T]) {
    let pc = cols + k - 1;
    for i in 0..k {
        for j in 0..k {
            let mut acc = T::zero();
            for f in 0..rows {
                let g_row = &g_out[f * cols..(f + 1) * cols];
                let prow = &padded[(f + i) * pc + j..(f + i) * pc + j + cols];
                acc += dot(g_row, prow);
            }
            gk[i * k + j] += acc;
        }
    }
}

/// Integer [`depthwise`]: int8-range operands widened to `i16`, `i32`
/// accumulation. Operands must lie in `[-127, 127]`, so each product fits
/// in `i16` and a `k x k` sum cannot overflow `i32` for `k <= 133`.
/// Integer depthwise convolution of a padded plane of int8-range values.
/// Returns the largest `|out|`. Operands are bounded by 127 in magnitude,
/// so every product fits `i16` and every sum of `k * k <= 25` products fits
/// `i32` exactly; all implementations agree bit for bit.
pub(crate) fn depthwise_i8(padded: &[i16], rows: usize, cols: usize, kernel: &[i8], k: usize, out: &mut [i32]) -> i32 {
    #[cfg(target_arch = "x86_64")]
    {
        // SSE2 is part of the x86_64 baseline.
        unsafe { depthwise_i8_sse2(padded, rows, cols, kernel, k, out) }
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        depthwise_i8_scalar(padded, rows, cols, kernel, k, out)
    }
}

pub(crate) fn depthwise_i8_scalar(
    padded: &[i16],
    rows: usize,
    cols: usize,
    kernel: &[i8],
    k: usize,
    out: &mut [i32],
) -> i32 {
    let pc = cols + k - 1;
    for f in 0..rows {
        let out_row = &mut out[f * cols..(f + 1) * cols];
        out_row.fill(0);
        for i in 0..k {
            let prow = &padded[(f + i) * pc..(f + i + 1) * pc];
            for j in 0..k {
                let w = kernel[i * k + j] as i16;
                for (o, &v) in out_row.iter_mut().zip(&prow[j..j + cols]) {
                    *o = o.wrapping_add(w.wrapping_mul(v) as i32);
                }
            }
        }
    }
    out.iter().fold(0, |m, &a| m.max(a.abs()))
}

/// Eight outputs at a time with `pmaddwd` on interleaved neighbouring
/// columns, so each multiply-add covers two taps; the scalar kernel handles
/// the column tail. Kernel sizes 3, 5 and 7 get unrolled instances.
#[cfg(target_arch = "x86_64")]
unsafe fn depthwise_i8_sse2(padded: &[i16], rows: usize, cols: usize, kernel: &[i8], k: usize, out: &mut [i32]) -> i32 {
    match k {
        3 => depthwise_i8_sse2_k::<3>(padded, rows, cols, kernel, out),
        5 => depthwise_i8_sse2_k::<5>(padded, rows, cols, kernel, out),
        7 => depthwise_i8_sse2_k::<7>(padded, rows, cols, kernel, out),
        _ => depthwise_i8_scalar(padded, rows, cols, kernel, k, out),
    }
}

#[cfg(target_arch = "x86_64")]
#[inline(always)]
unsafe fn depthwise_i8_sse2_k<const K: usize>(
    padded: &[i16],
    rows: usize,
    cols: usize,
    kernel: &[i8],
    out: &mut [i32],
) -> i32 {
    use std::arch::x86_64::*;
    const MAX_PAIRS: usize = 4;
    let pairs = K.div_ceil(2);
    let pc = cols + K - 1;
    assert!(padded.len() >= (rows + K - 1) * pc && out.len() >= rows * cols && kernel.len() >= K * K);
    // Tap pairs (w[j], w[j+1]) per kernel row, packed for pmaddwd; an odd
    // last tap pairs with zero.
    let mut wv = [[_mm_setzero_si128(); MAX_PAIRS]; K];
    for (i, row) in wv.iter_mut().enumerate() {
        for (jp, w) in row.iter_mut().enumerate().take(pairs) {
            let w0 = kernel[i * K + 2 * jp] as i16 as u16 as u32;
            let w1 = if 2 * jp + 1 < K { kernel[i * K + 2 * jp + 1] as i16 as u16 as u32 } else { 0 };
            *w = _mm_set1_epi32((w0 | (w1 << 16)) as i32);
        }
    }
    let abs = |v: __m128i| {
        let s = _mm_srai_epi32(v, 31);
        _mm_sub_epi32(_mm_xor_si128(v, s), s)
    };
    // SSE2 has no 32-bit max; select through a compare.
    let max = |a: __m128i, b: __m128i| {
        let gt = _mm_cmpgt_epi32(a, b);
        _mm_or_si128(_mm_and_si128(gt, a), _mm_andnot_si128(gt, b))
    };
    let full = cols / 8 * 8;
    let base = padded.as_ptr();
    let mut vmax = _mm_setzero_si128();
    for f in 0..rows {
        let mut b = 0;
        while b < full {
            let mut lo = _mm_setzero_si128();
            let mut hi = _mm_setzero_si128();
            for (i, wrow) in wv.iter().enumerate() {
                let row = base.add((f + i) * pc + b);
                for (jp, &w) in wrow.iter().enumerate().take(pairs) {
                    let j = 2 * jp;
                    let a = _mm_loadu_si128(row.add(j) as *const __m128i);
                    // Column j + 1 is only read when that tap exists, which
                    // keeps the load inside the padded row.
                    let c = if j + 1 < K {
                        _mm_loadu_si128(row.add(j + 1) as *const __m128i)
                    } else {
                        _mm_setzero_si128()
                    };
                    lo = _mm_add_epi32(lo, _mm_madd_epi16(_mm_unpacklo_epi16(a, c), w));
                    hi = _mm_add_epi32(hi, _mm_madd_epi16(_mm_unpackhi_epi16(a, c), w));
                }
            }
            let dst = out.as_mut_ptr().add(f * cols + b);
            _mm_storeu_si128(dst as *mut __m128i, lo);
            _mm_storeu_si128(dst.add(4) as *mut __m128i, hi);
            vmax = max(vmax, max(abs(lo), abs(hi)));
            b += 8;
        }
        for b in full..cols {
            let mut acc = 0i32;
            for i in 0..K {
                let prow = &padded[(f + i) * pc..];
                for j in 0..K {
                    acc += kernel[i * K + j] as i32 * prow[b + j] as i32;
                }
            }
            out[f * cols + b] = acc;
        }
    }
    let mut lanes = [0i32; 4];
    _mm_storeu_si128(lanes.as_mut_ptr() as *mut __m128i, vmax);
    let tail_max = (0..rows)
        .flat_map(|f| out[f * cols + full..(f + 1) * cols].iter())
        .fold(0, |m, &a| m.max(a.abs()));
    lanes.iter().copied().fold(tail_max, i32::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(src: &[f64], rows: usize, cols: usize, kernel: &[f64], k: usize) -> Vec<f64> {
        let p = (k / 2) as isize;
        let mut out = vec![0.0; rows * cols];
        for f in 0..rows {
            for b in 0..cols {
                let mut acc = 0.0;
                for i in 0..k {
                    for j in 0..k {
                        let r = (f as isize + i as isize - p).clamp(0, rows as isize - 1) as usize;
                        let c = (b as isize + j as isize - p).clamp(0, cols as isize - 1) as usize;
                        acc += kernel[i * k + j] * src[r * cols + c];
                    }
                }
                out[f * cols + b] = acc;
            }
        }
        out
    }

    #[test]
    fn depthwise_matches_clamped_index_oracle() {
        let (rows, cols, k) = (6, 7, 5);
        let src: Vec<f64> = (0..rows * cols).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let kernel: Vec<f64> = (0..k * k).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3).collect();
        let padded = pad_replicate(&src, rows, cols, k / 2);
        let mut out = vec![0.0; rows * cols];
        depthwise(&padded, rows, cols, &kernel, k, &mut out);
        let want = naive(&src, rows, cols, &kernel, k);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn borders_in_place_match_copy() {
        let (rows, cols, p) = (4, 6, 2);
        let src: Vec<i16> = (0..rows * cols).map(|i| i as i16 * 3 - 20).collect();
        let want = pad_replicate(&src, rows, cols, p);
        let pc = cols + 2 * p;
        let mut got = vec![0i16; want.len()];
        for r in 0..rows {
            got[(r + p) * pc + p..(r + p) * pc + p + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        replicate_borders(&mut got, rows, cols, p);
        assert_eq!(got, want);
    }

    #[test]
    fn input_grad_is_adjoint() {
        // <depthwise(pad(x)), g> == <x, fold(depthwise_input_grad(g))>
        let (rows, cols, k) = (5, 8, 5);
        let x: Vec<f64> = (0..rows * cols).map(|i| (i as f64 * 0.7).sin()).collect();
        let g: Vec<f64> = (0..rows * cols).map(|i| (i as f64 * 1.3).cos()).collect();
        let kernel: Vec<f64> = (0..k * k).map(|i| (i as f64 * 0.31).sin()).collect();
        let padded = pad_replicate(&x, rows, cols, 2);
        let mut y = vec![0.0; rows * cols];
        depthwise(&padded, rows, cols, &kernel, k, &mut y);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut gp = vec![0.0; padded.len()];
        depthwise_input_grad(&g, rows, cols, &kernel, k, &mut gp);
        let mut gx = vec![0.0; rows * cols];
        fold_padding_into(&gp, rows, cols, 2, &mut gx);
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn integer_path_matches_float_on_integers() {
        let (rows, cols, k) = (5, 6, 5);
        let src: Vec<i8> = (0..rows * cols).map(|i| ((i * 29) % 255) as i16 as i8).collect();
        let kernel: Vec<i8> = (0..k * k).map(|i| ((i * 53) % 255) as i16 as i8).collect();
        let wide: Vec<i16> = src.iter().map(|&v| v as i16).collect();
        let padded = pad_replicate(&wide, rows, cols, 2);
        let mut out = vec![0i32; rows * cols];
        depthwise_i8(&padded, rows, cols, &kernel, k, &mut out);
        let srcf: Vec<f64> = src.iter().map(|&v| v as f64).collect();
        let kf: Vec<f64> = kernel.iter().map(|&v| v as f64).collect();
        let want = naive(&srcf, rows, cols, &kf, k);
        for (a, b) in out.iter().zip(&want) {
            assert_eq!(*a as f64, *b);
        }
    }

    proptest::proptest! {
        #[test]
        fn integer_kernel_matches_scalar(
            rows in 1usize..6,
            cols in 1usize..40,
            half in 1usize..4,
            seed in proptest::prelude::any::<u64>(),
            extreme in proptest::prelude::any::<bool>(),
        ) {
            use rand::{Rng, SeedableRng};
            let k = 2 * half + 1;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || if extreme { if rng.random::<bool>() { 127 } else { -127 } } else { rng.random_range(-127..=127) };
            let src: Vec<i16> = (0..rows * cols).map(|_| draw() as i16).collect();
            let kernel: Vec<i8> = (0..k * k).map(|_| draw() as i8).collect();
            let padded = pad_replicate(&src, rows, cols, half);
            let mut a = vec![0i32; rows * cols];
            let mut b = vec![0i32; rows * cols];
            let ma = depthwise_i8(&padded, rows, cols, &kernel, k, &mut a);
            let mb = depthwise_i8_scalar(&padded, rows, cols, &kernel, k, &mut b);
            proptest::prop_assert_eq!(&a, &b);
            proptest::prop_assert_eq!(ma, mb);
            let srcf: Vec<f64> = src.iter().map(|&v| v as f64).collect();
            let kf: Vec<f64> = kernel.iter().map(|&v| v as f64).collect();
            let want = naive(&srcf, rows, cols, &kf, k);
            for (x, y) in a.iter().zip(&want) {
                proptest::prop_assert_eq!(*x as f64, *y);
            }
        }
    }
}
