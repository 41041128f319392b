//! Float checkpoint format.
//!
//! Little-endian: magic `ASE1`, `u32` version, `u32` n_blocks, `u32`
//! latent_channels, `u32` kernel_size, `f32` norm_scale; then for each block
//! the tensors dw1, pw1, alpha, dw2, pw2, each as `u32` rank, `u32` dims,
//! `f32` payload; then a CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};

use super::{BlockParams, ModelConfig, ModelParams, IO_CHANNELS};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ASE1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn dims(&mut self, dims: &[usize]) {
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d as u32);
        }
    }

    pub fn config(&mut self, cfg: &ModelConfig, norm_scale: f32) {
        self.u32(cfg.n_blocks as u32);
        self.u32(cfg.latent_channels as u32);
        self.u32(cfg.kernel_size as u32);
        self.f32(norm_scale);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Validates magic, version and trailing CRC, then positions the reader
    /// after the version field.
    pub fn open(bytes: &'a [u8], magic: &'static [u8; 4], version: u32) -> Result<Self> {
        let expected = std::str::from_utf8(magic).expect("ascii magic");
        let head = &bytes[..bytes.len().min(4)];
        if head != &magic[..head.len()] {
            return Err(Error::BadMagic { expected });
        }
        if bytes.len() < 12 {
            return Err(Error::ChecksumMismatch);
        }
        let found = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if found != version {
            return Err(Error::VersionUnsupported(found));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let crc = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != crc {
            return Err(Error::ChecksumMismatch);
        }
        Ok(Self { buf: body, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::ShapeMismatch("record runs past end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn dims(&mut self) -> Result<Vec<usize>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::ShapeMismatch(format!("tensor rank {rank}")));
        }
        (0..rank).map(|_| self.u32().map(|d| d as usize)).collect()
    }

    pub fn config(&mut self) -> Result<(ModelConfig, f32)> {
        let cfg = ModelConfig {
            n_blocks: self.u32()? as usize,
            latent_channels: self.u32()? as usize,
            kernel_size: self.u32()? as usize,
        };
        cfg.validate()?;
        let norm_scale = self.f32()?;
        Ok((cfg, norm_scale))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(Error::ChecksumMismatch)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} trailing bytes after last tensor",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Expected tensor shapes for one block, in serialization order.
pub(crate) fn block_shapes(cfg: &ModelConfig) -> [Vec<usize>; 5] {
    let (k, l) = (cfg.kernel_size, cfg.latent_channels);
    [
        vec![IO_CHANNELS, k, k],
        vec![l, IO_CHANNELS],
        vec![l],
        vec![l, k, k],
        vec![IO_CHANNELS, l],
    ]
}

pub(crate) fn check_dims(found: &[usize], want: &[usize], name: &str) -> Result<()> {
    if found != want {
        return Err(Error::ShapeMismatch(format!(
            "{name}: stored shape {found:?}, config implies {want:?}"
        )));
    }
    Ok(())
}

/// Assembles block tensors (serialization order) into [`BlockParams`].
pub(crate) fn block_from_vecs(cfg: &ModelConfig, mut t: Vec<Vec<f32>>) -> BlockParams<f32> {
    let (k, l) = (cfg.kernel_size, cfg.latent_channels);
    let pw2 = t.pop().expect("5 tensors");
    let dw2 = t.pop().expect("5 tensors");
    let alpha = t.pop().expect("5 tensors");
    let pw1 = t.pop().expect("5 tensors");
    let dw1 = t.pop().expect("5 tensors");
    BlockParams {
        dw1: Array3::from_shape_vec((IO_CHANNELS, k, k), dw1).expect("checked shape"),
        pw1: Array2::from_shape_vec((l, IO_CHANNELS), pw1).expect("checked shape"),
        alpha: Array1::from_vec(alpha),
        dw2: Array3::from_shape_vec((l, k, k), dw2).expect("checked shape"),
        pw2: Array2::from_shape_vec((IO_CHANNELS, l), pw2).expect("checked shape"),
    }
}

pub fn checkpoint_bytes(params: &ModelParams<f32>) -> Vec<u8> {
    let mut w = ByteWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    w.config(&params.config, params.norm_scale);
    for block in &params.blocks {
        for (t, shape) in block.tensors().iter().zip(block.shapes()) {
            w.dims(&shape);
            for &v in t.iter() {
                w.f32(v);
            }
        }
    }
    w.finish()
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = ByteReader::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let (config, norm_scale) = r.config()?;
    let shapes = block_shapes(&config);
    let mut blocks = Vec::with_capacity(config.n_blocks);
    for _ in 0..config.n_blocks {
        let mut tensors = Vec::with_capacity(5);
        for (shape, name) in shapes.iter().zip(super::BLOCK_TENSOR_NAMES) {
            let dims = r.dims()?;
            check_dims(&dims, shape, name)?;
            tensors.push(r.f32_vec(shape.iter().product())?);
        }
        blocks.push(block_from_vecs(&config, tensors));
    }
    r.finish()?;
    Ok(ModelParams {
        config,
        blocks,
        norm_scale,
    })
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(n: usize) -> ModelParams<f32> {
        let mut p = ModelParams::<f32>::init(
            ModelConfig {
                n_blocks: n,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        p.norm_scale = 12.5;
        p.blocks[0].alpha[3] = -0.25;
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = model(2);
        let q = parse_checkpoint(&checkpoint_bytes(&p)).unwrap();
        assert_eq!(p, q);
        let bits = |m: &ModelParams<f32>| -> Vec<u32> {
            m.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(q.norm_scale.to_bits(), 12.5f32.to_bits());
    }

    #[test]
    fn single_block_size_audit() {
        let bytes = checkpoint_bytes(&model(1));
        let header = 4 + 4 + 3 * 4 + 4;
        let dims = (1 + 3) * 4 + (1 + 2) * 4 + (1 + 1) * 4 + (1 + 3) * 4 + (1 + 2) * 4;
        let payload = 7730 * 4;
        assert_eq!(bytes.len(), header + dims + payload + 4);
        assert_eq!(payload, 30_920);
    }

    #[test]
    fn corruption_cases() {
        let bytes = checkpoint_bytes(&model(1));
        assert!(matches!(
            parse_checkpoint(&bytes[..bytes.len() - 10]),
            Err(Error::ChecksumMismatch)
        ));
        assert!(matches!(parse_checkpoint(&bytes[..6]), Err(Error::ChecksumMismatch)));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(matches!(parse_checkpoint(&flipped), Err(Error::ChecksumMismatch)));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(parse_checkpoint(&magic), Err(Error::BadMagic { .. })));
        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(
            parse_checkpoint(&version),
            Err(Error::VersionUnsupported(2))
        ));
    }
}
