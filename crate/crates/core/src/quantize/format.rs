//! Compact checkpoint format.
//!
//! Little-endian: magic `ASEQ`, `u32` version, the model header of the
//! float format, then for each block the tensors dw1, pw1, alpha, dw2, pw2,
//! each as `u8` dtype tag, `u32` rank, `u32` dims, an `f32` scale for int8
//! tensors, and the payload; then a CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use half::f16;

use super::{QuantizedBlock, QuantizedModel, QuantizedTensor};
use crate::error::{Error, Result};
use crate::model::checkpoint::{block_from_vecs, block_shapes, check_dims};
use crate::model::{ByteReader, ByteWriter, ModelParams, BLOCK_TENSOR_NAMES};

pub const QUANTIZED_MAGIC: &[u8; 4] = b"ASEQ";
pub const QUANTIZED_VERSION: u32 = 1;

/// int8 values with an `f32` scale.
pub const DTYPE_I8: u8 = 0;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F16: u8 = 2;

/// A model read from the compact format.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredModel {
    /// int8 kernels; runs on the integer path.
    Int8(QuantizedModel),
    /// Float kernels (stored as f16 or f32), widened to `f32`.
    Float(ModelParams<f32>),
}

fn write_i8(w: &mut ByteWriter, t: &QuantizedTensor) {
    w.u8(DTYPE_I8);
    w.dims(t.shape());
    w.f32(t.scale());
    let raw: Vec<u8> = t.values().iter().map(|&v| v as u8).collect();
    w.bytes(&raw);
}

fn write_f32(w: &mut ByteWriter, shape: &[usize], values: &[f32]) {
    w.u8(DTYPE_F32);
    w.dims(shape);
    for &v in values {
        w.f32(v);
    }
}

fn write_f16(w: &mut ByteWriter, shape: &[usize], values: &[f32]) {
    w.u8(DTYPE_F16);
    w.dims(shape);
    let raw: Vec<u8> = values
        .iter()
        .flat_map(|&v| f16::from_f32(v).to_le_bytes())
        .collect();
    w.bytes(&raw);
}

pub fn quantized_checkpoint_bytes(qm: &QuantizedModel) -> Vec<u8> {
    let mut w = ByteWriter::new(QUANTIZED_MAGIC, QUANTIZED_VERSION);
    w.config(&qm.config, qm.norm_scale);
    for b in &qm.blocks {
        write_i8(&mut w, &b.dw1);
        write_i8(&mut w, &b.pw1);
        write_f32(&mut w, &[b.alpha.len()], &b.alpha);
        write_i8(&mut w, &b.dw2);
        write_i8(&mut w, &b.pw2);
    }
    w.finish()
}

/// Kernels as `f16`, slopes as `f32`.
pub fn f16_checkpoint_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut w = ByteWriter::new(QUANTIZED_MAGIC, QUANTIZED_VERSION);
    w.config(&params.config, params.norm_scale);
    for b in &params.blocks {
        for ((t, shape), name) in b.tensors().iter().zip(b.shapes()).zip(BLOCK_TENSOR_NAMES) {
            if name == "alpha" {
                write_f32(&mut w, &shape, t);
            } else {
                write_f16(&mut w, &shape, t);
            }
        }
    }
    w.finish()
}

enum Tensor {
    I8(QuantizedTensor),
    Float(Vec<f32>),
}

fn read_tensor(r: &mut ByteReader<'_>, want: &[usize], name: &str) -> Result<Tensor> {
    let tag = r.u8()?;
    let dims = r.dims()?;
    check_dims(&dims, want, name)?;
    let n: usize = want.iter().product();
    match tag {
        DTYPE_I8 => {
            let scale = r.f32()?;
            let values = r.bytes(n)?.iter().map(|&b| b as i8).collect();
            Ok(Tensor::I8(QuantizedTensor::from_parts(values, scale, dims)?))
        }
        DTYPE_F32 => Ok(Tensor::Float(r.f32_vec(n)?)),
        DTYPE_F16 => {
            let raw = r.bytes(n.checked_mul(2).ok_or(Error::ChecksumMismatch)?)?;
            Ok(Tensor::Float(
                raw.chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
            ))
        }
        other => Err(Error::ShapeMismatch(format!("{name}: unknown dtype tag {other}"))),
    }
}

pub fn parse_stored_model(bytes: &[u8]) -> Result<StoredModel> {
    let mut r = ByteReader::open(bytes, QUANTIZED_MAGIC, QUANTIZED_VERSION)?;
    let (config, norm_scale) = r.config()?;
    let shapes = block_shapes(&config);
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        let mut ts = Vec::with_capacity(5);
        for (shape, name) in shapes.iter().zip(BLOCK_TENSOR_NAMES) {
            ts.push(read_tensor(&mut r, shape, name)?);
        }
        blocks.push(ts);
    }
    r.finish()?;

    let all_i8 = blocks.iter().all(|ts| {
        ts.iter()
            .enumerate()
            .all(|(i, t)| matches!((i == 2, t), (true, Tensor::Float(_)) | (false, Tensor::I8(_))))
    });
    if all_i8 {
        let blocks = blocks.into_iter().map(int8_block).collect();
        return Ok(StoredModel::Int8(QuantizedModel {
            config,
            blocks,
            norm_scale,
        }));
    }
    let float_blocks = blocks
        .into_iter()
        .map(|ts| {
            ts.into_iter()
                .map(|t| match t {
                    Tensor::Float(v) => Ok(v),
                    Tensor::I8(_) => Err(Error::ShapeMismatch(
                        "mixed int8 and float kernels are not supported".into(),
                    )),
                })
                .collect::<Result<Vec<_>>>()
                .map(|v| block_from_vecs(&config, v))
        })
        .collect::<Result<_>>()?;
    Ok(StoredModel::Float(ModelParams {
        config,
        blocks: float_blocks,
        norm_scale,
    }))
}

/// Caller has checked the int8/f32 tag pattern.
fn int8_block(ts: Vec<Tensor>) -> QuantizedBlock {
    let [dw1, pw1, alpha, dw2, pw2]: [Tensor; 5] = ts.try_into().ok().expect("5 tensors");
    let q = |t: Tensor| match t {
        Tensor::I8(q) => q,
        Tensor::Float(_) => unreachable!("checked int8"),
    };
    let Tensor::Float(alpha) = alpha else {
        unreachable!("checked f32")
    };
    QuantizedBlock {
        dw1: q(dw1),
        pw1: q(pw1),
        alpha,
        dw2: q(dw2),
        pw2: q(pw2),
    }
}

pub fn save_quantized_checkpoint(qm: &QuantizedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, quantized_checkpoint_bytes(qm)).map_err(|e| Error::io(path, e))
}

pub fn save_f16_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, f16_checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_stored_model(path: impl AsRef<Path>) -> Result<StoredModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_stored_model(&bytes)
}
