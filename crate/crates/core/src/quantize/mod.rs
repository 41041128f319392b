//! Post-training weight quantization.
//!
//! Convolution kernels are stored as symmetric per-tensor int8 with a
//! single `f32` scale and zero-point 0; PReLU slopes stay `f32`. Inference
//! quantizes activations on the fly (see [`quantized_forward`]). A 16-bit
//! float storage variant keeps the float inference path.

mod format;
mod forward;

pub use format::{
    f16_checkpoint_bytes, load_stored_model, parse_stored_model, quantized_checkpoint_bytes,
    save_f16_checkpoint, save_quantized_checkpoint, StoredModel, DTYPE_F16, DTYPE_F32, DTYPE_I8,
    QUANTIZED_MAGIC, QUANTIZED_VERSION,
};
pub use forward::quantized_forward;

use half::f16;

use crate::error::{Error, Result};
use crate::model::{BlockParams, ModelConfig, ModelParams};

/// Largest stored magnitude; the int8 value -128 is never produced.
pub const QMAX: i32 = 127;

/// Worst-case integer accumulations of the default architecture fit `i32`.
const _: () = assert!(127 * 127 * 25 * 256 < (1i64 << 31));

/// Symmetric int8 tensor: `value = scale * q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    values: Vec<i8>,
    scale: f32,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn from_parts(values: Vec<i8>, scale: f32, shape: Vec<usize>) -> Result<Self> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                values.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        if values.iter().any(|&q| q == i8::MIN) {
            return Err(Error::ShapeMismatch("int8 value -128 outside the symmetric range".into()));
        }
        Ok(Self { values, scale, shape })
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dequantize(&self) -> Vec<f32> {
        self.values.iter().map(|&q| q as f32 * self.scale).collect()
    }
}

/// `scale = max|t| / 127` (1 for an all-zero tensor), `q = round(t / scale)`.
pub fn quantize_tensor(t: &[f32], shape: &[usize]) -> Result<QuantizedTensor> {
    if t.len() != shape.iter().product::<usize>() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for shape {shape:?}",
            t.len()
        )));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let max = t.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max > 0.0 { (max as f64 / QMAX as f64) as f32 } else { 1.0 };
    // A subnormal max can round the scale to zero.
    let scale = if scale > 0.0 { scale } else { f32::MIN_POSITIVE };
    let values = t
        .iter()
        .map(|&v| (v as f64 / scale as f64).round().clamp(-QMAX as f64, QMAX as f64) as i8)
        .collect();
    Ok(QuantizedTensor {
        values,
        scale,
        shape: shape.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub dw1: QuantizedTensor,
    pub pw1: QuantizedTensor,
    pub alpha: Vec<f32>,
    pub dw2: QuantizedTensor,
    pub pw2: QuantizedTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub blocks: Vec<QuantizedBlock>,
    pub norm_scale: f32,
}

fn check_accumulator_bounds(cfg: &ModelConfig) -> Result<()> {
    let unit = (QMAX * QMAX) as i64;
    let kk = (cfg.kernel_size * cfg.kernel_size) as i64;
    if kk * unit > i32::MAX as i64 || cfg.latent_channels as i64 * unit > i32::MAX as i64 {
        return Err(Error::InvalidConfig(
            "int32 accumulators could overflow for this model size".into(),
        ));
    }
    Ok(())
}

pub fn quantize_model(params: &ModelParams<f32>) -> Result<QuantizedModel> {
    params.config.validate()?;
    check_accumulator_bounds(&params.config)?;
    let blocks = params
        .blocks
        .iter()
        .map(|b| {
            let q = |a: &[f32], shape: &[usize]| quantize_tensor(a, shape);
            Ok(QuantizedBlock {
                dw1: q(b.dw1.as_slice().expect("standard layout"), b.dw1.shape())?,
                pw1: q(b.pw1.as_slice().expect("standard layout"), b.pw1.shape())?,
                alpha: b.alpha.to_vec(),
                dw2: q(b.dw2.as_slice().expect("standard layout"), b.dw2.shape())?,
                pw2: q(b.pw2.as_slice().expect("standard layout"), b.pw2.shape())?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(QuantizedModel {
        config: params.config,
        blocks,
        norm_scale: params.norm_scale,
    })
}

impl QuantizedModel {
    /// Float model with every kernel replaced by its dequantized value.
    pub fn dequantize(&self) -> ModelParams<f32> {
        let cfg = self.config;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let mut out = BlockParams::<f32>::zeros(&cfg);
                for (dst, src) in [
                    (out.dw1.as_slice_mut(), &b.dw1),
                    (out.pw1.as_slice_mut(), &b.pw1),
                    (out.dw2.as_slice_mut(), &b.dw2),
                    (out.pw2.as_slice_mut(), &b.pw2),
                ] {
                    dst.expect("standard layout").copy_from_slice(&src.dequantize());
                }
                out.alpha.as_slice_mut().expect("contiguous").copy_from_slice(&b.alpha);
                out
            })
            .collect();
        ModelParams {
            config: cfg,
            blocks,
            norm_scale: self.norm_scale,
        }
    }

    /// Stored bytes of weights, scales and slopes, excluding headers.
    pub fn payload_bytes(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                [&b.dw1, &b.pw1, &b.dw2, &b.pw2]
                    .iter()
                    .map(|t| t.values.len() + 4)
                    .sum::<usize>()
                    + 4 * b.alpha.len()
            })
            .sum()
    }
}

/// Rounds every kernel through `f16`; slopes stay `f32`.
pub fn round_through_f16(params: &ModelParams<f32>) -> ModelParams<f32> {
    let mut out = params.clone();
    for b in &mut out.blocks {
        for t in [&mut b.dw1, &mut b.dw2] {
            t.mapv_inplace(|v| f16::from_f32(v).to_f32());
        }
        for t in [&mut b.pw1, &mut b.pw2] {
            t.mapv_inplace(|v| f16::from_f32(v).to_f32());
        }
    }
    out
}
