//! Residual stack of depthwise-separable convolutional autoencoder blocks.
//!
//! One block maps a `[2, F, B]` tensor through
//! `depthwise(5x5) -> pointwise(2 -> latent) -> PReLU -> depthwise(5x5) ->
//! pointwise(latent -> 2)` and adds its input back. Blocks run in sequence.
//! There are no bias terms, and borders are replicate-padded.
//!
//! The latent activations are never materialized for all channels at once:
//! the forward pass streams over latent channels in fixed-size chunks, and
//! the backward pass recomputes each channel's activations from the cached
//! first-layer output. Chunk partial sums are reduced in chunk order, so
//! results do not depend on the thread count.

pub(crate) mod checkpoint;
pub(crate) mod conv;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub(crate) use checkpoint::{ByteReader, ByteWriter};

use std::cell::Cell;

use ndarray::{Array1, Array2, Array3};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use conv::{
    depthwise, dot, depthwise_input_grad, depthwise_kernel_grad, fold_padding_into, pad_replicate,
    pad_replicate_into,
};

/// Real and imaginary planes.
pub const IO_CHANNELS: usize = 2;

/// Latent channels handled per parallel work item.
pub(crate) const CHANNEL_CHUNK: usize = 16;

thread_local! {
    static FORWARD_CALLS: Cell<usize> = const { Cell::new(0) };
}

/// Number of full-model forward passes started on the current thread.
pub fn forward_calls() -> usize {
    FORWARD_CALLS.with(Cell::get)
}

pub(crate) fn count_forward_call() {
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub latent_channels: usize,
    pub kernel_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_blocks: 1,
            latent_channels: 256,
            kernel_size: 5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 {
            return Err(Error::InvalidConfig("n_blocks must be at least 1".into()));
        }
        if self.latent_channels == 0 {
            return Err(Error::InvalidConfig("latent_channels must be at least 1".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig("kernel_size must be odd".into()));
        }
        Ok(())
    }

    pub fn pad(&self) -> usize {
        self.kernel_size / 2
    }

    pub fn params_per_block(&self) -> usize {
        let kk = self.kernel_size * self.kernel_size;
        IO_CHANNELS * kk
            + self.latent_channels * IO_CHANNELS
            + self.latent_channels
            + self.latent_channels * kk
            + IO_CHANNELS * self.latent_channels
    }
}

/// Weights of one block. Kernels are stored `[channels, k, k]`, pointwise
/// matrices `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = f32> {
    pub dw1: Array3<T>,
    pub pw1: Array2<T>,
    pub alpha: Array1<T>,
    pub dw2: Array3<T>,
    pub pw2: Array2<T>,
}

/// Names of the block tensors in serialization order.
pub const BLOCK_TENSOR_NAMES: [&str; 5] = ["dw1", "pw1", "alpha", "dw2", "pw2"];

impl<T: Scalar> BlockParams<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (k, l) = (cfg.kernel_size, cfg.latent_channels);
        Self {
            dw1: Array3::zeros((IO_CHANNELS, k, k)),
            pw1: Array2::zeros((l, IO_CHANNELS)),
            alpha: Array1::zeros(l),
            dw2: Array3::zeros((l, k, k)),
            pw2: Array2::zeros((IO_CHANNELS, l)),
        }
    }

    pub fn tensors(&self) -> [&[T]; 5] {
        [
            self.dw1.as_slice().expect("standard layout"),
            self.pw1.as_slice().expect("standard layout"),
            self.alpha.as_slice().expect("standard layout"),
            self.dw2.as_slice().expect("standard layout"),
            self.pw2.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [T]; 5] {
        [
            self.dw1.as_slice_mut().expect("standard layout"),
            self.pw1.as_slice_mut().expect("standard layout"),
            self.alpha.as_slice_mut().expect("standard layout"),
            self.dw2.as_slice_mut().expect("standard layout"),
            self.pw2.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn shapes(&self) -> [Vec<usize>; 5] {
        [
            self.dw1.shape().to_vec(),
            self.pw1.shape().to_vec(),
            self.alpha.shape().to_vec(),
            self.dw2.shape().to_vec(),
            self.pw2.shape().to_vec(),
        ]
    }

    pub fn cast<U: Scalar>(&self) -> BlockParams<U> {
        let c = |v: &T| U::of(v.f64());
        BlockParams {
            dw1: self.dw1.map(c),
            pw1: self.pw1.map(c),
            alpha: self.alpha.map(c),
            dw2: self.dw2.map(c),
            pw2: self.pw2.map(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub blocks: Vec<BlockParams<T>>,
    /// Mean spectrogram normalization scale seen during training. Kept as
    /// metadata; inference normalizes each clip by its own scale.
    pub norm_scale: f32,
}

/// Output of [`ModelParams::forward`] that [`ModelParams::backward`] consumes.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    blocks: Vec<BlockCache<T>>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Array3<T>,
    d1: Array3<T>,
}

/// Parameter gradients shaped like the model, plus the input gradient.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub params: ModelParams<T>,
    pub input: Array3<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero kernels: every block is the identity.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            blocks: (0..config.n_blocks).map(|_| BlockParams::zeros(&config)).collect(),
            norm_scale: 1.0,
        })
    }

    /// He-uniform kernels (bound `sqrt(6 / fan_in)`), PReLU slopes at 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kk = (config.kernel_size * config.kernel_size) as f64;
        for block in &mut params.blocks {
            let fan_ins = [kk, IO_CHANNELS as f64, kk, config.latent_channels as f64];
            let targets = [
                block.dw1.as_slice_mut().expect("standard layout"),
                block.pw1.as_slice_mut().expect("standard layout"),
                block.dw2.as_slice_mut().expect("standard layout"),
                block.pw2.as_slice_mut().expect("standard layout"),
            ];
            for (t, fan_in) in targets.into_iter().zip(fan_ins) {
                let bound = (6.0 / fan_in).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                for v in t.iter_mut() {
                    *v = T::of(dist.sample(&mut rng));
                }
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    pub fn num_params(&self) -> usize {
        self.blocks.len() * self.config.params_per_block()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config,
            blocks: self.blocks.iter().map(BlockParams::cast).collect(),
            norm_scale: self.norm_scale,
        }
    }

    /// Flat views of every tensor, block by block in serialization order.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.blocks.iter().flat_map(|b| b.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect()
    }

    fn check_input(&self, x: &Array3<T>) -> Result<(usize, usize)> {
        let sh = x.shape();
        if sh[0] != IO_CHANNELS {
            return Err(Error::ShapeMismatch(format!(
                "expected {IO_CHANNELS} input planes, found {}",
                sh[0]
            )));
        }
        let k = self.config.kernel_size;
        if sh[1] < k || sh[2] < k {
            return Err(Error::ShapeTooSmall {
                frames: sh[1],
                bins: sh[2],
                kernel: k,
            });
        }
        Ok((sh[1], sh[2]))
    }

    /// Forward pass keeping what [`Self::backward`] needs.
    pub fn forward(&self, x: &Array3<T>) -> Result<(Array3<T>, ForwardCache<T>)> {
        let (rows, cols) = self.check_input(x)?;
        count_forward_call();
        let mut h = x.as_standard_layout().into_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (out, d1) = block_forward(block, &self.config, &h, rows, cols);
            caches.push(BlockCache { input: h, d1 });
            h = out;
        }
        Ok((h, ForwardCache { blocks: caches }))
    }

    /// Forward pass without a cache.
    pub fn predict(&self, x: &Array3<T>) -> Result<Array3<T>> {
        let (rows, cols) = self.check_input(x)?;
        count_forward_call();
        let mut h = x.as_standard_layout().into_owned();
        for block in &self.blocks {
            h = block_forward(block, &self.config, &h, rows, cols).0;
        }
        Ok(h)
    }

    /// Reverse-mode gradients of a scalar loss given `g_y = dL/dy`.
    pub fn backward(&self, cache: &ForwardCache<T>, g_y: &Array3<T>) -> Result<Gradients<T>> {
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::CacheMismatch(format!(
                "cache holds {} blocks, model has {}",
                cache.blocks.len(),
                self.blocks.len()
            )));
        }
        let Some(first) = cache.blocks.first() else {
            return Err(Error::CacheMismatch("empty cache".into()));
        };
        if g_y.shape() != first.input.shape() {
            return Err(Error::CacheMismatch(format!(
                "output gradient shape {:?} differs from cached input {:?}",
                g_y.shape(),
                first.input.shape()
            )));
        }
        let rows = g_y.shape()[1];
        let cols = g_y.shape()[2];
        let mut grads = self.zeros_like();
        let mut g = g_y.as_standard_layout().into_owned();
        for (b, (block, bc)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            if bc.input.shape() != g.shape() || bc.d1.shape() != g.shape() {
                return Err(Error::CacheMismatch(format!("block {b} shapes differ")));
            }
            g = block_backward(block, &self.config, bc, &g, &mut grads.blocks[b], rows, cols);
        }
        Ok(Gradients {
            params: grads,
            input: g,
        })
    }
}

fn prelu<T: Scalar>(v: T, alpha: T) -> T {
    if v >= T::zero() {
        v
    } else {
        alpha * v
    }
}

fn first_layer<T: Scalar>(
    block: &BlockParams<T>,
    cfg: &ModelConfig,
    x: &[T],
    rows: usize,
    cols: usize,
) -> Vec<T> {
    let plane = rows * cols;
    let k = cfg.kernel_size;
    let dw1 = block.dw1.as_slice().expect("standard layout");
    let mut d1 = vec![T::zero(); IO_CHANNELS * plane];
    for c in 0..IO_CHANNELS {
        let padded = pad_replicate(&x[c * plane..(c + 1) * plane], rows, cols, cfg.pad());
        depthwise(&padded, rows, cols, &dw1[c * k * k..(c + 1) * k * k], k, &mut d1[c * plane..(c + 1) * plane]);
    }
    d1
}

fn chunk_ranges(latent: usize) -> Vec<std::ops::Range<usize>> {
    (0..latent)
        .step_by(CHANNEL_CHUNK)
        .map(|s| s..(s + CHANNEL_CHUNK).min(latent))
        .collect()
}

/// Pre-activation of latent channel `c`.
fn latent_preact<T: Scalar>(pw1: &Array2<T>, c: usize, d1: &[T], plane: usize, out: &mut [T]) {
    let (w0, w1) = (pw1[[c, 0]], pw1[[c, 1]]);
    let (a, b) = d1.split_at(plane);
    for ((o, &u), &v) in out.iter_mut().zip(a).zip(b) {
        *o = w0 * u + w1 * v;
    }
}

fn block_forward<T: Scalar>(
    block: &BlockParams<T>,
    cfg: &ModelConfig,
    x: &Array3<T>,
    rows: usize,
    cols: usize,
) -> (Array3<T>, Array3<T>) {
    let plane = rows * cols;
    let k = cfg.kernel_size;
    let p = cfg.pad();
    let xs = x.as_slice().expect("standard layout");
    let d1 = first_layer(block, cfg, xs, rows, cols);
    let dw2 = block.dw2.as_slice().expect("standard layout");

    let partials: Vec<Vec<T>> = chunk_ranges(cfg.latent_channels)
        .into_par_iter()
        .map(|range| {
            let mut acc = vec![T::zero(); IO_CHANNELS * plane];
            let mut h = vec![T::zero(); plane];
            let mut padded = vec![T::zero(); (rows + 2 * p) * (cols + 2 * p)];
            let mut d2 = vec![T::zero(); plane];
            for c in range {
                latent_preact(&block.pw1, c, &d1, plane, &mut h);
                let a = block.alpha[c];
                h.iter_mut().for_each(|v| *v = prelu(*v, a));
                pad_replicate_into(&h, rows, cols, p, &mut padded);
                depthwise(&padded, rows, cols, &dw2[c * k * k..(c + 1) * k * k], k, &mut d2);
                for o in 0..IO_CHANNELS {
                    let w = block.pw2[[o, c]];
                    for (dst, &v) in acc[o * plane..(o + 1) * plane].iter_mut().zip(&d2) {
                        *dst += w * v;
                    }
                }
            }
            acc
        })
        .collect();

    let mut out = x.clone();
    let os = out.as_slice_mut().expect("standard layout");
    for part in &partials {
        for (o, &v) in os.iter_mut().zip(part) {
            *o += v;
        }
    }
    let d1 = Array3::from_shape_vec((IO_CHANNELS, rows, cols), d1).expect("shape matches");
    (out, d1)
}

struct ChunkGrads<T> {
    channels: Vec<ChannelGrads<T>>,
    g_d1: Vec<T>,
}

struct ChannelGrads<T> {
    pw1: [T; IO_CHANNELS],
    alpha: T,
    dw2: Vec<T>,
    pw2: [T; IO_CHANNELS],
}

fn block_backward<T: Scalar>(
    block: &BlockParams<T>,
    cfg: &ModelConfig,
    cache: &BlockCache<T>,
    g_out: &Array3<T>,
    grads: &mut BlockParams<T>,
    rows: usize,
    cols: usize,
) -> Array3<T> {
    let plane = rows * cols;
    let k = cfg.kernel_size;
    let p = cfg.pad();
    let padded_len = (rows + 2 * p) * (cols + 2 * p);
    let d1 = cache.d1.as_slice().expect("standard layout");
    let g = g_out.as_slice().expect("standard layout");
    let dw2 = block.dw2.as_slice().expect("standard layout");

    let chunks: Vec<ChunkGrads<T>> = chunk_ranges(cfg.latent_channels)
        .into_par_iter()
        .map(|range| {
            let mut g_d1 = vec![T::zero(); IO_CHANNELS * plane];
            let mut channels = Vec::with_capacity(range.len());
            let mut h1 = vec![T::zero(); plane];
            let mut h2 = vec![T::zero(); plane];
            let mut padded = vec![T::zero(); padded_len];
            let mut d2 = vec![T::zero(); plane];
            let mut g_d2 = vec![T::zero(); plane];
            let mut g_padded = vec![T::zero(); padded_len];
            let mut g_h = vec![T::zero(); plane];
            for c in range {
                let a = block.alpha[c];
                latent_preact(&block.pw1, c, d1, plane, &mut h1);
                for (o, &v) in h2.iter_mut().zip(&h1) {
                    *o = prelu(v, a);
                }
                pad_replicate_into(&h2, rows, cols, p, &mut padded);
                let kern = &dw2[c * k * k..(c + 1) * k * k];
                depthwise(&padded, rows, cols, kern, k, &mut d2);

                let mut g_pw2 = [T::zero(); IO_CHANNELS];
                for (o, gp) in g_pw2.iter_mut().enumerate() {
                    *gp = dot(&g[o * plane..(o + 1) * plane], &d2);
                }
                let (w0, w1) = (block.pw2[[0, c]], block.pw2[[1, c]]);
                for ((dst, &u), &v) in g_d2.iter_mut().zip(&g[..plane]).zip(&g[plane..2 * plane]) {
                    *dst = w0 * u + w1 * v;
                }

                let mut g_dw2 = vec![T::zero(); k * k];
                depthwise_kernel_grad(&g_d2, &padded, rows, cols, k, &mut g_dw2);
                depthwise_input_grad(&g_d2, rows, cols, kern, k, &mut g_padded);
                g_h.fill(T::zero());
                fold_padding_into(&g_padded, rows, cols, p, &mut g_h);

                // g_h becomes the gradient at the pre-activation; h2 is
                // free again and holds min(pre, 0).
                for (n, &pre) in h2.iter_mut().zip(&h1) {
                    *n = if pre < T::zero() { pre } else { T::zero() };
                }
                let g_alpha = dot(&g_h, &h2);
                for (gv, &pre) in g_h.iter_mut().zip(&h1) {
                    *gv *= if pre < T::zero() { a } else { T::one() };
                }
                let mut g_pw1 = [T::zero(); IO_CHANNELS];
                for (i, gp) in g_pw1.iter_mut().enumerate() {
                    let w = block.pw1[[c, i]];
                    let src = &d1[i * plane..(i + 1) * plane];
                    *gp = dot(&g_h, src);
                    for (dst, &gv) in g_d1[i * plane..(i + 1) * plane].iter_mut().zip(&g_h) {
                        *dst += w * gv;
                    }
                }
                channels.push(ChannelGrads {
                    pw1: g_pw1,
                    alpha: g_alpha,
                    dw2: g_dw2,
                    pw2: g_pw2,
                });
            }
            ChunkGrads { channels, g_d1 }
        })
        .collect();

    let mut g_d1 = vec![T::zero(); IO_CHANNELS * plane];
    let mut c = 0;
    let g_dw2_all = grads.dw2.as_slice_mut().expect("standard layout");
    for chunk in chunks {
        for (dst, v) in g_d1.iter_mut().zip(chunk.g_d1) {
            *dst += v;
        }
        for ch in chunk.channels {
            for i in 0..IO_CHANNELS {
                grads.pw1[[c, i]] += ch.pw1[i];
                grads.pw2[[i, c]] += ch.pw2[i];
            }
            grads.alpha[c] += ch.alpha;
            for (dst, v) in g_dw2_all[c * k * k..(c + 1) * k * k].iter_mut().zip(ch.dw2) {
                *dst += v;
            }
            c += 1;
        }
    }

    // Skip path plus the first depthwise layer.
    let mut g_in = g_out.clone();
    let gi = g_in.as_slice_mut().expect("standard layout");
    let x = cache.input.as_slice().expect("standard layout");
    let dw1 = block.dw1.as_slice().expect("standard layout");
    let g_dw1 = grads.dw1.as_slice_mut().expect("standard layout");
    let mut g_padded = vec![T::zero(); padded_len];
    for ch in 0..IO_CHANNELS {
        let range = ch * plane..(ch + 1) * plane;
        let padded = pad_replicate(&x[range.clone()], rows, cols, p);
        let kr = ch * k * k..(ch + 1) * k * k;
        depthwise_kernel_grad(&g_d1[range.clone()], &padded, rows, cols, k, &mut g_dw1[kr.clone()]);
        depthwise_input_grad(&g_d1[range.clone()], rows, cols, &dw1[kr], k, &mut g_padded);
        fold_padding_into(&g_padded, rows, cols, p, &mut gi[range]);
    }
    g_in
}
