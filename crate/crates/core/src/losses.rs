//! Training objective: variance-normalized pixel loss on the stacked planes
//! plus a weighted windowed-SSIM term on magnitudes, with analytic gradients.
//!
//! Reductions run in `f64` regardless of the element type.

use ndarray::{Array, Array2, Array3, Axis, Dimension, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this, the reference is considered constant.
pub const PIXEL_DENOM_EPSILON: f64 = 1e-12;
/// Magnitude floor in the magnitude-chain derivative.
pub const MAGNITUDE_EPSILON: f64 = 1e-8;
/// Weight of the `1 - SSIM` term in the total loss.
pub const SSIM_WEIGHT: f64 = 0.5;
/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 3;
/// Default dynamic range as a fraction of the reference magnitude range.
pub const DEFAULT_RANGE_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct PixelLoss<T, D: Dimension> {
    pub loss: f64,
    pub grad: Array<T, D>,
}

/// `sum (y - y_hat)^2 / sum (y - mean(y))^2`.
pub fn pixel_loss<T: Scalar, D: Dimension>(
    y_hat: &Array<T, D>,
    y: &Array<T, D>,
) -> Result<PixelLoss<T, D>> {
    if y_hat.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            y_hat.shape(),
            y.shape()
        )));
    }
    let n = y.len() as f64;
    let mean = y.iter().map(|v| v.f64()).sum::<f64>() / n;
    let denom: f64 = y.iter().map(|v| (v.f64() - mean).powi(2)).sum();
    if !(denom > PIXEL_DENOM_EPSILON) {
        return Err(Error::ConstantTarget);
    }
    let num: f64 = y_hat
        .iter()
        .zip(y.iter())
        .map(|(a, b)| (b.f64() - a.f64()).powi(2))
        .sum();
    let scale = -2.0 / denom;
    let grad = Zip::from(y_hat)
        .and(y)
        .map_collect(|a, b| T::of(scale * (b.f64() - a.f64())));
    Ok(PixelLoss {
        loss: num / denom,
        grad,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range `L`. `None` uses 0.4 times the reference magnitude range.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            k1: 0.01,
            k2: 0.02,
            dynamic_range: None,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.005..=0.01).contains(&self.k1) {
            return Err(Error::InvalidConfig(format!(
                "k1 = {} outside [0.005, 0.01]",
                self.k1
            )));
        }
        if !(0.01..=0.03).contains(&self.k2) {
            return Err(Error::InvalidConfig(format!(
                "k2 = {} outside [0.01, 0.03]",
                self.k2
            )));
        }
        if let Some(l) = self.dynamic_range {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("dynamic_range = {l}")));
            }
        }
        Ok(())
    }

    /// Resolves `L` against a reference map.
    pub fn dynamic_range_for<T: Scalar>(&self, y: &Array2<T>) -> f64 {
        if let Some(l) = self.dynamic_range {
            return l;
        }
        let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.f64()), hi.max(v.f64()))
        });
        let range = hi - lo;
        if range > 0.0 {
            DEFAULT_RANGE_FRACTION * range
        } else {
            // Constant reference: no range to scale by.
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsimLoss<T> {
    pub ssim_mean: f64,
    pub loss: f64,
    /// Derivative of `loss` with respect to `y_hat`.
    pub grad: Array2<T>,
}

/// Per-window SSIM map (window centers of all full 3x3 windows).
pub fn ssim_map<T: Scalar>(a: &Array2<T>, b: &Array2<T>, cfg: &SsimConfig) -> Result<Array2<f64>> {
    Ok(ssim_inner(a, b, cfg, false)?.0)
}

/// Mean windowed SSIM between predicted and reference magnitudes, and the
/// gradient of `1 - mean` with respect to the prediction.
pub fn ssim_loss<T: Scalar>(y_hat: &Array2<T>, y: &Array2<T>, cfg: &SsimConfig) -> Result<SsimLoss<T>> {
    let (map, grad) = ssim_inner(y_hat, y, cfg, true)?;
    let ssim_mean = map.mean().expect("non-empty map");
    Ok(SsimLoss {
        ssim_mean,
        loss: 1.0 - ssim_mean,
        grad: grad.expect("requested").mapv(T::of),
    })
}

fn ssim_inner<T: Scalar>(
    x: &Array2<T>,
    y: &Array2<T>,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(Array2<f64>, Option<Array2<f64>>)> {
    cfg.validate()?;
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let (rows, cols) = x.dim();
    let w = SSIM_WINDOW;
    if rows < w || cols < w {
        return Err(Error::TooSmall { rows, cols, window: w });
    }
    let l = cfg.dynamic_range_for(y);
    let c1 = (cfg.k1 * l).powi(2);
    let c2 = (cfg.k2 * l).powi(2);
    let xs = x.mapv(|v| v.f64());
    let ys = y.mapv(|v| v.f64());
    let (mr, mc) = (rows - w + 1, cols - w + 1);
    let inv = 1.0 / (w * w) as f64;

    let mut map = Array2::<f64>::zeros((mr, mc));
    // Per-window coefficients of dS/dx_p = a + b * y_p + c * x_p.
    let mut coef = if want_grad {
        Some(Array3::<f64>::zeros((3, mr, mc)))
    } else {
        None
    };
    for r in 0..mr {
        for c in 0..mc {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..w {
                for j in 0..w {
                    sx += xs[[r + i, c + j]];
                    sy += ys[[r + i, c + j]];
                }
            }
            let mx = sx * inv;
            let my = sy * inv;
            // Centered second moments; exact zero on flat windows.
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..w {
                for j in 0..w {
                    let a = xs[[r + i, c + j]] - mx;
                    let b = ys[[r + i, c + j]] - my;
                    vx += a * a;
                    vy += b * b;
                    cxy += a * b;
                }
            }
            vx *= inv;
            vy *= inv;
            cxy *= inv;
            let a1 = 2.0 * mx * my + c1;
            let a2 = 2.0 * cxy + c2;
            let b1 = mx * mx + my * my + c1;
            let b2 = vx + vy + c2;
            let s = a1 * a2 / (b1 * b2);
            map[[r, c]] = s;
            if let Some(coef) = coef.as_mut() {
                let beta = 2.0 * s * inv / a2;
                let gamma = -2.0 * s * inv / b2;
                let through_mean = s * inv * (2.0 * my / a1 - 2.0 * mx / b1);
                coef[[0, r, c]] = through_mean - beta * my - gamma * mx;
                coef[[1, r, c]] = beta;
                coef[[2, r, c]] = gamma;
            }
        }
    }

    let grad = coef.map(|coef| {
        let m = (mr * mc) as f64;
        let mut g = Array2::<f64>::zeros((rows, cols));
        let sums: Vec<Array2<f64>> = coef
            .axis_iter(Axis(0))
            .map(|plane| {
                let mut acc = Array2::<f64>::zeros((rows, cols));
                for r in 0..mr {
                    for c in 0..mc {
                        let v = plane[[r, c]];
                        for i in 0..w {
                            for j in 0..w {
                                acc[[r + i, c + j]] += v;
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        Zip::from(&mut g)
            .and(&sums[0])
            .and(&sums[1])
            .and(&sums[2])
            .and(&ys)
            .and(&xs)
            .for_each(|g, &a, &b, &c, &yv, &xv| {
                // Gradient of 1 - mean(SSIM).
                *g = -(a + b * yv + c * xv) / m;
            });
        g
    });
    Ok((map, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss<T> {
    pub loss: f64,
    pub pixel: f64,
    pub ssim_mean: f64,
    pub grad: Array3<T>,
}

/// `|re + i im|` of a stacked `[2, F, B]` tensor, in `f64`.
pub fn magnitude<T: Scalar>(stacked: &Array3<T>) -> Array2<f64> {
    let re = stacked.index_axis(Axis(0), 0);
    let im = stacked.index_axis(Axis(0), 1);
    Zip::from(&re).and(&im).map_collect(|r, i| r.f64().hypot(i.f64()))
}

/// `pixel(y_hat, y) + 0.5 * (1 - ssim(|y_hat|, |y|))` and its gradient.
pub fn total_loss<T: Scalar>(y_hat: &Array3<T>, y: &Array3<T>, cfg: &SsimConfig) -> Result<TotalLoss<T>> {
    if y_hat.shape() != y.shape() || y.shape()[0] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            y_hat.shape(),
            y.shape()
        )));
    }
    let pixel = pixel_loss(y_hat, y)?;
    let mag_hat = magnitude(y_hat);
    let mag = magnitude(y);
    let ssim = ssim_loss(&mag_hat, &mag, cfg)?;

    let mut grad = pixel.grad;
    let (frames, bins) = mag_hat.dim();
    for f in 0..frames {
        for b in 0..bins {
            let g_mag = SSIM_WEIGHT * ssim.grad[[f, b]];
            let m = mag_hat[[f, b]].max(MAGNITUDE_EPSILON);
            let re = y_hat[[0, f, b]].f64();
            let im = y_hat[[1, f, b]].f64();
            grad[[0, f, b]] += T::of(g_mag * re / m);
            grad[[1, f, b]] += T::of(g_mag * im / m);
        }
    }
    Ok(TotalLoss {
        loss: pixel.loss + SSIM_WEIGHT * ssim.loss,
        pixel: pixel.loss,
        ssim_mean: ssim.ssim_mean,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand2(rows: usize, cols: usize, seed: u64, lo: f64, hi: f64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
    }

    fn rand3(rows: usize, cols: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((2, rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// max |analytic - numeric| / max |numeric|
    fn rel_err(a: &[f64], n: &[f64]) -> f64 {
        let scale = n.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        a.iter().zip(n).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    fn central_diff<D: Dimension>(x: &Array<f64, D>, f: impl Fn(&Array<f64, D>) -> f64) -> Vec<f64> {
        let h = 1e-5;
        let mut x = x.clone();
        let n = x.len();
        (0..n)
            .map(|i| {
                let orig = x.as_slice().unwrap()[i];
                x.as_slice_mut().unwrap()[i] = orig + h;
                let up = f(&x);
                x.as_slice_mut().unwrap()[i] = orig - h;
                let down = f(&x);
                x.as_slice_mut().unwrap()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn pixel_identities() {
        let y = rand3(4, 5, 1);
        assert_eq!(pixel_loss(&y, &y).unwrap().loss, 0.0);
        let mean = y.mean().unwrap();
        let flat = Array3::from_elem(y.dim(), mean);
        assert!((pixel_loss(&flat, &y).unwrap().loss - 1.0).abs() < 1e-12);
        assert!(matches!(pixel_loss(&flat, &flat), Err(Error::ConstantTarget)));
        let other = Array3::<f64>::zeros((2, 4, 6));
        assert!(matches!(pixel_loss(&other, &y), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        let y = rand3(5, 6, 2);
        let y_hat = rand3(5, 6, 3);
        let analytic = pixel_loss(&y_hat, &y).unwrap().grad;
        let numeric = central_diff(&y_hat, |p| pixel_loss(p, &y).unwrap().loss);
        assert!(rel_err(analytic.as_slice().unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn pixel_shift_and_scale_invariance() {
        let y = rand3(4, 4, 5);
        let y_hat = rand3(4, 4, 6);
        let base = pixel_loss(&y_hat, &y).unwrap().loss;
        let shifted = pixel_loss(&(&y_hat + 3.5), &(&y + 3.5)).unwrap().loss;
        let scaled = pixel_loss(&(&y_hat * -2.5), &(&y * -2.5)).unwrap().loss;
        assert!((base - shifted).abs() < 1e-12 * base.max(1.0));
        assert!((base - scaled).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn ssim_identity_and_constants() {
        let cfg = SsimConfig::default();
        let y = rand2(6, 7, 1, 0.0, 2.0);
        let s = ssim_loss(&y, &y, &cfg).unwrap();
        assert!((s.ssim_mean - 1.0).abs() < 1e-12);
        assert!(s.loss.abs() < 1e-12);
        assert!(ssim_map(&y, &y, &cfg).unwrap().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let (c, cp, l) = (0.7, 0.3, 0.5);
        let cfg = SsimConfig { dynamic_range: Some(l), ..cfg };
        let a = Array2::from_elem((5, 5), cp);
        let b = Array2::from_elem((5, 5), c);
        let c1 = (0.01 * l) * (0.01 * l);
        let want = (2.0 * c * cp + c1) / (c * c + cp * cp + c1);
        assert!((ssim_loss(&a, &b, &cfg).unwrap().ssim_mean - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_errors() {
        let cfg = SsimConfig::default();
        let small = Array2::<f64>::zeros((2, 9));
        assert!(matches!(ssim_loss(&small, &small, &cfg), Err(Error::TooSmall { .. })));
        let bad = SsimConfig { k1: 0.05, ..cfg };
        let y = rand2(4, 4, 1, 0.0, 1.0);
        assert!(matches!(ssim_loss(&y, &y, &bad), Err(Error::InvalidConfig(_))));
        let bad = SsimConfig { k2: 0.001, ..cfg };
        assert!(bad.validate().is_err());
        let bad = SsimConfig { dynamic_range: Some(0.0), ..cfg };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn default_range_is_fraction_of_reference_span() {
        let y = Array2::from_shape_vec((2, 2), vec![1.0, 3.0, 2.0, 6.0]).unwrap();
        assert!((SsimConfig::default().dynamic_range_for(&y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let cfg = SsimConfig::default();
        let y = rand2(6, 7, 4, 0.0, 1.0);
        let y_hat = rand2(6, 7, 5, 0.0, 1.0);
        let analytic = ssim_loss(&y_hat, &y, &cfg).unwrap().grad;
        let numeric = central_diff(&y_hat, |p| ssim_loss(p, &y, &cfg).unwrap().loss);
        let e = rel_err(analytic.as_slice().unwrap(), &numeric);
        assert!(e < 1e-5, "rel err {e}");
    }

    #[test]
    fn total_decomposition_and_gradient() {
        let cfg = SsimConfig::default();
        let y = rand3(6, 7, 8);
        let y_hat = rand3(6, 7, 9);
        let t = total_loss(&y_hat, &y, &cfg).unwrap();
        assert!((t.loss - t.pixel - 0.5 * (1.0 - t.ssim_mean)).abs() < 1e-15);
        let same = total_loss(&y, &y, &cfg).unwrap();
        assert!(same.loss.abs() < 1e-12);

        let numeric = central_diff(&y_hat, |p| total_loss(p, &y, &cfg).unwrap().loss);
        let e = rel_err(t.grad.as_slice().unwrap(), &numeric);
        assert!(e < 1e-5, "rel err {e}");
    }

    #[test]
    fn total_works_in_f32() {
        let y = rand3(6, 7, 8).mapv(|v| v as f32);
        let y_hat = rand3(6, 7, 9).mapv(|v| v as f32);
        let t = total_loss(&y_hat, &y, &SsimConfig::default()).unwrap();
        assert!(t.loss.is_finite() && t.grad.iter().all(|v| v.is_finite()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn ssim_bounded_and_symmetric(seed in 0u64..10_000, rows in 3usize..8, cols in 3usize..8) {
            let cfg = SsimConfig { dynamic_range: Some(0.4), ..Default::default() };
            let a = rand2(rows, cols, seed, 0.0, 1.0);
            let b = rand2(rows, cols, seed + 1, 0.0, 1.0);
            let ab = ssim_map(&a, &b, &cfg).unwrap();
            let ba = ssim_map(&b, &a, &cfg).unwrap();
            for (x, y) in ab.iter().zip(ba.iter()) {
                prop_assert!((-1.0..=1.0).contains(x));
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
