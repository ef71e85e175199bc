//! Temporal branch: a dual-path transformer over learned waveform features.
//!
//! Encoder (strided conv + ReLU), 50%-overlap chunking into `[C, N, F′]`,
//! stacked dual-path blocks (a local pass inside chunks, a global pass
//! across chunks), overlap-add back to `[C, T]`, a multiplicative mask on the
//! encoded features and a transposed-conv decoder.
//!
//! Each transformer is `ẑ = LN(MSA(z) + z)`, `out = LN(ẑ + ReLU(GRU(ẑ)·W + b))`
//! with no positional encoding; the GRU carries order information.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::conv::{conv1d, conv_out_len, conv_transpose1d, Conv1dGeometry};
use crate::error::{Error, Result};
use crate::layers::{Gru, LayerNorm, Linear, PRelu};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DptConfig {
    pub enc_channels: usize,
    pub enc_kernel: usize,
    pub enc_stride: usize,
    pub chunk: usize,
    pub num_blocks: usize,
    pub heads: usize,
    /// GRU width inside each transformer; `None` means twice `enc_channels`.
    pub gru_hidden: Option<usize>,
    pub compress_factor: usize,
}

impl Default for DptConfig {
    fn default() -> Self {
        DptConfig {
            enc_channels: 64,
            enc_kernel: 16,
            enc_stride: 8,
            chunk: 64,
            num_blocks: 4,
            heads: 4,
            gru_hidden: None,
            compress_factor: 3,
        }
    }
}

impl DptConfig {
    pub fn hidden(&self) -> usize {
        self.gru_hidden.unwrap_or(2 * self.enc_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("dptnet: {m}")));
        if self.enc_channels == 0 || self.enc_kernel == 0 || self.enc_stride == 0 {
            return bad("encoder sizes must be positive".into());
        }
        if self.enc_stride > self.enc_kernel {
            return bad(format!("stride {} exceeds kernel {}", self.enc_stride, self.enc_kernel));
        }
        if self.chunk < 2 || !self.chunk.is_multiple_of(2) {
            return bad(format!("chunk length {} must be even and at least 2", self.chunk));
        }
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1".into());
        }
        if self.heads == 0 || !self.enc_channels.is_multiple_of(self.heads) {
            return bad(format!("{} channels not divisible into {} heads", self.enc_channels, self.heads));
        }
        if self.hidden() == 0 || self.compress_factor == 0 {
            return bad("gru_hidden and compress_factor must be positive".into());
        }
        Ok(())
    }

    /// Padded input length and frame count for a clip of `len` samples.
    pub fn frames(&self, len: usize) -> Result<(usize, usize)> {
        if len < self.enc_kernel {
            return Err(Error::Audio(format!("clip of {len} samples is shorter than the {}-sample encoder kernel", self.enc_kernel)));
        }
        let padded = self.enc_kernel + (len - self.enc_kernel).div_ceil(self.enc_stride) * self.enc_stride;
        let frames = conv_out_len(padded, self.enc_kernel, self.enc_stride, 0).expect("padded >= kernel");
        Ok((padded, frames))
    }
}

/// Number of 50%-overlap chunks of length `chunk` covering `frames` steps.
pub fn chunk_count(frames: usize, chunk: usize) -> usize {
    let hop = chunk / 2;
    if frames <= chunk {
        1
    } else {
        (frames - chunk).div_ceil(hop) + 1
    }
}

/// `[C, N, F′]` chunks plus the frame count they were cut from.
#[derive(Debug, Clone)]
pub struct ChunkedTensor {
    pub data: Var,
    pub frames: usize,
}

impl ChunkedTensor {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn chunks(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn chunk_len(&self) -> usize {
        self.data.shape()[2]
    }
}

fn chunk_index(c: usize, n: usize, chunk: usize, frames: usize) -> Rc<[usize]> {
    let hop = chunk / 2;
    let mut idx = Vec::with_capacity(c * n * chunk);
    for ch in 0..c {
        for k in 0..n {
            for j in 0..chunk {
                let t = k * hop + j;
                idx.push(if t < frames { ch * frames + t } else { crate::autodiff::PAD_INDEX });
            }
        }
    }
    idx.into()
}

/// `[C, T] -> [C, N, F′]` with hop `F′/2`, zero-padding the tail.
pub fn segment(x: &Var, chunk: usize) -> Result<ChunkedTensor> {
    let s = x.shape();
    let [c, frames] = s[..] else {
        return Err(Error::InvalidShape {
            op: "segment",
            detail: format!("expected [channels, frames], got {s:?}"),
        });
    };
    if chunk < 2 || !chunk.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("chunk length {chunk}")));
    }
    let n = chunk_count(frames, chunk);
    let data = x.gather(chunk_index(c, n, chunk, frames), &[c, n, chunk])?;
    Ok(ChunkedTensor { data, frames })
}

/// Overlap-add back to `[C, T]`, dividing each step by how many chunks
/// cover it. Inverse of [`segment`].
pub fn desegment(x: &ChunkedTensor) -> Result<Var> {
    let (c, n, chunk) = (x.channels(), x.chunks(), x.chunk_len());
    let frames = x.frames;
    let idx = chunk_index(c, n, chunk, frames);
    let summed = x.data.scatter_add(idx, &[c, frames])?;
    let hop = chunk / 2;
    let mut cover = vec![0.0; frames];
    for k in 0..n {
        for j in 0..chunk {
            if let Some(v) = cover.get_mut(k * hop + j) {
                *v += 1.0;
            }
        }
    }
    let inv = Tensor::new([1, frames], cover.iter().map(|v| 1.0 / v).collect())?;
    summed.mul(&x.data.tape().constant(inv))
}

/// Strided reduction of keys/values along the sequence: kernel `c`,
/// stride `c`, applied as a matmul over groups of `c` steps.
#[derive(Debug, Clone)]
pub struct MemoryCompression {
    pub proj: Linear,
    pub factor: usize,
}

impl MemoryCompression {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, factor: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(MemoryCompression {
            proj: Linear::with_bias(store, name, factor * dim, dim, bias, rng)?,
            factor,
        })
    }

    /// Sets the kernel to pass through the first step of each group.
    pub fn set_identity(&self, store: &mut ParamStore) -> Result<()> {
        let (d, cd) = (self.proj.d_out, self.proj.d_in);
        let mut w = Tensor::zeros([d, cd]);
        for i in 0..d {
            w.data_mut()[i * cd + i] = 1.0;
        }
        store.set(&format!("{}.weight", self.proj.name), w)?;
        if self.proj.bias {
            store.set(&format!("{}.bias", self.proj.name), Tensor::zeros([d]))?;
        }
        Ok(())
    }

    /// `[B, S, d] -> [B, ceil(S/c), d]`.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let s = x.shape();
        let (b, len, d) = (s[0], s[1], s[2]);
        let groups = len.div_ceil(self.factor);
        let padded = x.pad(1, 0, groups * self.factor - len)?;
        self.proj.forward(ctx, &padded.reshape(&[b, groups, self.factor * d])?)
    }
}

/// Real multi-head self-attention over `[B, S, d]`, optionally with
/// compressed keys and values.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub compress: Option<(MemoryCompression, MemoryCompression)>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        compress: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{dim} channels not divisible into {heads} heads")));
        }
        // A bias on the keys adds the same constant to every logit of a
        // query row, which softmax cancels; the keys (and their compression)
        // carry none.
        let compress = match compress {
            Some(c) => Some((
                MemoryCompression::new(store, &format!("{name}.compress_k"), dim, c, false, rng)?,
                MemoryCompression::new(store, &format!("{name}.compress_v"), dim, c, true, rng)?,
            )),
            None => None,
        };
        Ok(MultiHeadAttention {
            heads,
            dim,
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::with_bias(store, &format!("{name}.k"), dim, dim, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            compress,
        })
    }

    fn split_heads(&self, x: &Var) -> Result<Var> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], self.heads, self.dim / self.heads])?.permute(&[0, 2, 1, 3])
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "multi_head_attention",
                lhs: s,
                rhs: vec![self.dim],
            });
        }
        let (b, len) = (s[0], s[1]);
        let mut k = self.k.forward(ctx, x)?;
        let mut v = self.v.forward(ctx, x)?;
        if let Some((ck, cv)) = &self.compress {
            k = ck.forward(ctx, &k)?;
            v = cv.forward(ctx, &v)?;
        }
        let q = self.split_heads(&self.q.forward(ctx, x)?)?;
        let (k, v) = (self.split_heads(&k)?, self.split_heads(&v)?);
        let dh = self.dim / self.heads;
        let logits = q.matmul(&k.transpose_last()?)?.scale(1.0 / (dh as f64).sqrt());
        let mixed = logits.softmax().matmul(&v)?;
        let merged = mixed.permute(&[0, 2, 1, 3])?.reshape(&[b, len, self.dim])?;
        self.out.forward(ctx, &merged)
    }
}

/// The GRU-augmented transformer layer.
#[derive(Debug, Clone)]
pub struct ImprovedTransformer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub gru: Gru,
    pub proj: Linear,
    pub norm2: LayerNorm,
}

impl ImprovedTransformer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        compress: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ImprovedTransformer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, compress, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            gru: Gru::new(store, &format!("{name}.gru"), dim, hidden, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), hidden, dim, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    /// `z: [B, S, d]`.
    pub fn forward(&self, ctx: &Ctx, z: &Var) -> Result<Var> {
        let zh = self.norm1.forward(ctx, &self.attn.forward(ctx, z)?.add(z)?)?;
        let ff = self.proj.forward(ctx, &self.gru.forward(ctx, &zh)?)?.relu();
        self.norm2.forward(ctx, &zh.add(&ff)?)
    }
}

/// Local pass along `F′` inside each chunk, then a global pass along `N`.
#[derive(Debug, Clone)]
pub struct DptBlock {
    pub local: ImprovedTransformer,
    pub global: ImprovedTransformer,
}

impl DptBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DptConfig, rng: &mut impl Rng) -> Result<Self> {
        let (d, h, g) = (cfg.enc_channels, cfg.heads, cfg.hidden());
        Ok(DptBlock {
            local: ImprovedTransformer::new(store, &format!("{name}.local"), d, h, g, None, rng)?,
            global: ImprovedTransformer::new(store, &format!("{name}.global"), d, h, g, Some(cfg.compress_factor), rng)?,
        })
    }

    /// Local stage only: `[C, N, F′] -> [C, N, F′]`.
    pub fn local(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let y = self.local.forward(ctx, &x.permute(&[1, 2, 0])?)?;
        y.permute(&[2, 0, 1])
    }

    pub fn forward(&self, ctx: &Ctx, x: &ChunkedTensor) -> Result<ChunkedTensor> {
        let y = self.local(ctx, &x.data)?;
        let g = self.global.forward(ctx, &y.permute(&[2, 1, 0])?)?;
        Ok(ChunkedTensor {
            data: g.permute(&[2, 1, 0])?,
            frames: x.frames,
        })
    }
}

#[derive(Debug, Clone)]
pub struct DptNet {
    pub name: String,
    pub config: DptConfig,
    blocks: Vec<DptBlock>,
    mask_act: PRelu,
    mask_proj: Linear,
}

impl DptNet {
    pub fn new(store: &mut ParamStore, name: &str, config: DptConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (c, k) = (config.enc_channels, config.enc_kernel);
        let bound = 1.0 / (k as f64).sqrt();
        store.insert(format!("{name}.encoder.weight"), Tensor::uniform([c, 1, k], -bound, bound, rng))?;
        store.insert(format!("{name}.encoder.bias"), Tensor::zeros([c]))?;
        let bound = 1.0 / (c as f64 * k as f64).sqrt();
        store.insert(format!("{name}.decoder.weight"), Tensor::uniform([c, 1, k], -bound, bound, rng))?;
        let blocks = (0..config.num_blocks)
            .map(|i| DptBlock::new(store, &format!("{name}.block{i}"), &config, rng))
            .collect::<Result<_>>()?;
        Ok(DptNet {
            name: name.to_string(),
            mask_act: PRelu::new(store, &format!("{name}.mask.act"))?,
            mask_proj: Linear::new(store, &format!("{name}.mask.proj"), c, c, rng)?,
            config,
            blocks,
        })
    }

    fn geometry(&self) -> Conv1dGeometry {
        Conv1dGeometry {
            stride: self.config.enc_stride,
            padding: 0,
        }
    }

    /// `x: [L] -> [C, T]`; the tail is zero-padded to a whole stride.
    pub fn encode(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let len = x.numel();
        let (padded, _) = self.config.frames(len)?;
        let x = x.reshape(&[1, 1, len])?.pad(2, 0, padded - len)?;
        let w = ctx.param(&format!("{}.encoder.weight", self.name))?;
        let b = ctx.param(&format!("{}.encoder.bias", self.name))?;
        let y = conv1d(&x, &w, Some(&b), self.geometry())?.relu();
        let s = y.shape();
        y.reshape(&[s[1], s[2]])
    }

    /// The stacked dual-path blocks on `[C, T]` features.
    pub fn separate(&self, ctx: &Ctx, encoded: &Var) -> Result<Var> {
        let mut x = segment(encoded, self.config.chunk)?;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(ctx, &x)?;
            x.data.ensure_finite(&format!("dptnet block {i}"))?;
        }
        desegment(&x)
    }

    /// Mask module and decoder: `[C, T]` features and encodings to `[len]`.
    pub fn mask_and_decode(&self, ctx: &Ctx, features: &Var, encoded: &Var, len: usize) -> Result<Var> {
        if features.shape() != encoded.shape() {
            return Err(Error::ShapeMismatch {
                op: "mask_and_decode",
                lhs: features.shape(),
                rhs: encoded.shape(),
            });
        }
        let (padded, frames) = self.config.frames(len)?;
        if encoded.shape()[1] != frames {
            return Err(Error::InvalidShape {
                op: "mask_and_decode",
                detail: format!("{} frames for a {len}-sample clip, expected {frames}", encoded.shape()[1]),
            });
        }
        let f = self.mask_act.forward(ctx, &features.transpose_last()?)?;
        let mask = self.mask_proj.forward(ctx, &f)?.relu().transpose_last()?;
        let masked = mask.mul(encoded)?;
        let c = self.config.enc_channels;
        let w = ctx.param(&format!("{}.decoder.weight", self.name))?;
        let wave = conv_transpose1d(&masked.reshape(&[1, c, frames])?, &w, None, self.geometry())?;
        debug_assert_eq!(wave.numel(), padded);
        wave.reshape(&[padded])?.slice(0, 0, len)
    }

    /// `noisy: [L] -> [L]`.
    pub fn forward(&self, ctx: &Ctx, noisy: &Var) -> Result<Var> {
        let len = noisy.numel();
        let encoded = self.encode(ctx, noisy)?;
        let features = self.separate(ctx, &encoded)?;
        self.mask_and_decode(ctx, &features, &encoded, len)
    }
}

#[cfg(test)]
mod tests;
