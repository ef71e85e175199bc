//! Spectral branch: a complex Swin-Unet over the noisy spectrogram.
//!
//! The spectrogram is treated as a one-channel complex image `[K, F]`,
//! zero-padded so every stage tiles into whole windows, embedded as
//! non-overlapping patches, run through a hierarchical encoder, a bottleneck
//! and a mirrored decoder with skip connections, and projected back to one
//! complex value per bin. That raw output either is the estimate or becomes a
//! bounded mask on the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::complex::CVar;
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::layers::{AttentionScore, ComplexLayerNorm, ComplexLinear, Cstb, UnitSpec};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwinUnetConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Blocks per encoder stage, bottleneck last. The decoder mirrors the
    /// encoder entries.
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
    pub mlp_ratio: usize,
    pub mask_connection: bool,
    pub score: AttentionScore,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl Default for SwinUnetConfig {
    fn default() -> Self {
        SwinUnetConfig {
            patch_size: 4,
            embed_dim: 24,
            depths: vec![2, 2, 2],
            heads: vec![3, 6, 12],
            window: 4,
            mlp_ratio: 2,
            mask_connection: true,
            score: AttentionScore::Re,
            dropout: 0.0,
            ln_eps: 1e-8,
        }
    }
}

impl SwinUnetConfig {
    /// Resolution levels, bottleneck included.
    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Channels at level `i`.
    pub fn dim(&self, level: usize) -> usize {
        self.embed_dim << level
    }

    /// Both grid axes are padded to a multiple of this.
    pub fn pad_multiple(&self) -> usize {
        self.patch_size * (1 << (self.stages() - 1)) * self.window
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("swinunet: {m}")));
        if self.patch_size == 0 || self.embed_dim == 0 || self.window == 0 || self.mlp_ratio == 0 {
            return bad("patch_size, embed_dim, window and mlp_ratio must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() > 8 {
            return bad(format!("{} stages", self.depths.len()));
        }
        if self.heads.len() != self.depths.len() {
            return bad(format!("{} head counts for {} stages", self.heads.len(), self.depths.len()));
        }
        if let Some(d) = self.depths.iter().find(|d| **d % 2 != 0) {
            return bad(format!("stage depth {d} is odd; blocks come in W-MSA/SW-MSA pairs"));
        }
        for (i, &h) in self.heads.iter().enumerate() {
            if h == 0 || !self.dim(i).is_multiple_of(h) {
                return bad(format!("stage {i}: {} channels not divisible into {h} heads", self.dim(i)));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {}", self.dropout));
        }
        if self.ln_eps <= 0.0 {
            return bad(format!("ln_eps {}", self.ln_eps));
        }
        Ok(())
    }

    fn unit(&self, level: usize) -> UnitSpec {
        UnitSpec {
            dim: self.dim(level),
            heads: self.heads[level],
            window: self.window,
            mlp_ratio: self.mlp_ratio,
            score: self.score,
            ln_eps: self.ln_eps,
            dropout: self.dropout,
        }
    }
}

/// Bookkeeping for padding a `[K, F]` grid and undoing it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PaddedGrid {
    pub frames: usize,
    pub bins: usize,
    pub padded_frames: usize,
    pub padded_bins: usize,
}

impl PaddedGrid {
    pub fn new(frames: usize, bins: usize, multiple: usize) -> Self {
        let up = |n: usize| n.div_ceil(multiple).max(1) * multiple;
        PaddedGrid {
            frames,
            bins,
            padded_frames: up(frames),
            padded_bins: up(bins),
        }
    }

    /// Zero-pads the trailing edge of a `[K, F]` grid.
    pub fn pad(&self, x: &CVar) -> Result<CVar> {
        x.pad(0, 0, self.padded_frames - self.frames)?.pad(1, 0, self.padded_bins - self.bins)
    }

    pub fn unpad(&self, x: &CVar) -> Result<CVar> {
        x.slice(0, 0, self.frames)?.slice(1, 0, self.bins)
    }
}

/// `M = tanh(|F|)·F/|F|`, computed as `F·h(|F|²)` with `h(s) = tanh(√s)/√s`
/// so that it is smooth through `F = 0` (where it is 0).
pub fn bounded_mask(raw: &CVar) -> Result<CVar> {
    raw.mul_real(&raw.abs_sq().tanh_ratio())
}

/// A bounded complex mask, `|values| ≤ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMask {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexMask {
    pub fn magnitude(&self) -> Vec<f64> {
        self.re.data().iter().zip(self.im.data()).map(|(a, b)| a.hypot(*b)).collect()
    }
}

/// `[B, H, W, r·r·C] -> [B, r·H, r·W, C]`.
pub fn pixel_shuffle(x: &CVar, r: usize) -> Result<CVar> {
    let s = x.shape();
    let [b, h, w, c] = s[..] else {
        return Err(Error::InvalidShape {
            op: "pixel_shuffle",
            detail: format!("expected 4 axes, got {s:?}"),
        });
    };
    if c % (r * r) != 0 {
        return Err(Error::InvalidShape {
            op: "pixel_shuffle",
            detail: format!("{c} channels not divisible by {}", r * r),
        });
    }
    let c_out = c / (r * r);
    x.reshape(&[b, h, w, r, r, c_out])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h * r, w * r, c_out])
}

/// `[B, H, W, C] -> [B, H/r, W/r, r·r·C]`, the inverse of [`pixel_shuffle`].
pub fn space_to_depth(x: &CVar, r: usize) -> Result<CVar> {
    let s = x.shape();
    let [b, h, w, c] = s[..] else {
        return Err(Error::InvalidShape {
            op: "space_to_depth",
            detail: format!("expected 4 axes, got {s:?}"),
        });
    };
    if h % r != 0 || w % r != 0 {
        return Err(Error::InvalidShape {
            op: "space_to_depth",
            detail: format!("grid {h}x{w} not divisible by {r}"),
        });
    }
    x.reshape(&[b, h / r, r, w / r, r, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h / r, w / r, r * r * c])
}

/// 2×2 neighborhood concatenation, LayerNorm, then `4C -> 2C`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    pub norm: ComplexLayerNorm,
    pub proj: ComplexLinear,
}

impl PatchMerge {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(PatchMerge {
            norm: ComplexLayerNorm::new(store, &format!("{name}.norm"), 4 * dim, eps)?,
            proj: ComplexLinear::new(store, &format!("{name}.proj"), 4 * dim, 2 * dim, false, rng)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &CVar) -> Result<CVar> {
        let s = x.shape();
        if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::InvalidShape {
                op: "patch_merge",
                detail: format!("grid {s:?} has odd extents"),
            });
        }
        let y = space_to_depth(x, 2)?;
        self.proj.forward(ctx, &self.norm.forward(ctx, &y)?)
    }
}

/// `C -> 2C` then a 2× pixel shuffle, leaving `C/2` channels.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    pub proj: ComplexLinear,
}

impl PatchExpand {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("patch expand needs an even channel count, got {dim}")));
        }
        Ok(PatchExpand {
            proj: ComplexLinear::new(store, &format!("{name}.proj"), dim, 2 * dim, false, rng)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &CVar) -> Result<CVar> {
        pixel_shuffle(&self.proj.forward(ctx, x)?, 2)
    }
}

#[derive(Debug, Clone)]
struct DecoderStage {
    expand: PatchExpand,
    fuse: ComplexLinear,
    blocks: Vec<Cstb>,
}

/// Output of one forward pass on the tape.
#[derive(Debug, Clone)]
pub struct SpectralOutput {
    /// Estimated spectrum `[K, F]`.
    pub estimate: CVar,
    /// Raw network output `[K, F]` before masking.
    pub raw: CVar,
    /// The bounded mask, when the mask connection is on.
    pub mask: Option<CVar>,
}

#[derive(Debug, Clone)]
pub struct SwinUnet {
    pub name: String,
    pub config: SwinUnetConfig,
    embed: ComplexLinear,
    encoder: Vec<Vec<Cstb>>,
    merges: Vec<PatchMerge>,
    bottleneck: Vec<Cstb>,
    decoder: Vec<DecoderStage>,
    final_norm: ComplexLayerNorm,
    final_expand: ComplexLinear,
    head: ComplexLinear,
}

fn run_blocks(ctx: &Ctx, blocks: &[Cstb], mut x: CVar) -> Result<CVar> {
    for b in blocks {
        x = b.forward(ctx, &x)?;
    }
    Ok(x)
}

/// Runs one stage, checks its output and tags non-finite failures with the
/// stage name.
fn in_stage(stage: &str, f: impl FnOnce() -> Result<CVar>) -> Result<CVar> {
    let location = format!("swinunet {stage}");
    let out = f().map_err(|e| match e {
        Error::NonFinite { location: inner, index } => Error::NonFinite {
            location: format!("{location}: {inner}"),
            index,
        },
        e => e,
    })?;
    out.ensure_finite(&location)?;
    Ok(out)
}

fn blocks(store: &mut ParamStore, name: &str, depth: usize, spec: UnitSpec, rng: &mut impl Rng) -> Result<Vec<Cstb>> {
    (0..depth / 2).map(|j| Cstb::new(store, &format!("{name}.block{j}"), spec, rng)).collect()
}

impl SwinUnet {
    pub fn new(store: &mut ParamStore, name: &str, config: SwinUnetConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let p = c.patch_size;
        let last = c.stages() - 1;
        let embed = ComplexLinear::new(store, &format!("{name}.embed"), p * p, c.embed_dim, false, rng)?;
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for i in 0..last {
            encoder.push(blocks(store, &format!("{name}.enc{i}"), c.depths[i], c.unit(i), rng)?);
            merges.push(PatchMerge::new(store, &format!("{name}.merge{i}"), c.dim(i), c.ln_eps, rng)?);
        }
        let bottleneck = blocks(store, &format!("{name}.bottleneck"), c.depths[last], c.unit(last), rng)?;
        let mut decoder = Vec::new();
        for i in (0..last).rev() {
            decoder.push(DecoderStage {
                expand: PatchExpand::new(store, &format!("{name}.expand{i}"), c.dim(i + 1), rng)?,
                fuse: ComplexLinear::new(store, &format!("{name}.fuse{i}"), 2 * c.dim(i), c.dim(i), true, rng)?,
                blocks: blocks(store, &format!("{name}.dec{i}"), c.depths[i], c.unit(i), rng)?,
            });
        }
        let final_norm = ComplexLayerNorm::new(store, &format!("{name}.final_norm"), c.embed_dim, c.ln_eps)?;
        let final_expand =
            ComplexLinear::new(store, &format!("{name}.final_expand"), c.embed_dim, p * p * c.embed_dim, false, rng)?;
        let head = ComplexLinear::new(store, &format!("{name}.head"), c.embed_dim, 1, true, rng)?;
        Ok(SwinUnet {
            name: name.to_string(),
            config,
            embed,
            encoder,
            merges,
            bottleneck,
            decoder,
            final_norm,
            final_expand,
            head,
        })
    }

    /// Pads `[K, F]` and maps each `p×p` patch to a token: `[1, K'/p, F'/p, C]`.
    pub fn patch_embed(&self, ctx: &Ctx, spec: &CVar) -> Result<(CVar, PaddedGrid)> {
        let s = spec.shape();
        let [k, f] = s[..] else {
            return Err(Error::InvalidShape {
                op: "patch_embed",
                detail: format!("expected [frames, bins], got {s:?}"),
            });
        };
        let grid = PaddedGrid::new(k, f, self.config.pad_multiple());
        let x = grid.pad(spec)?.reshape(&[1, grid.padded_frames, grid.padded_bins, 1])?;
        let patches = space_to_depth(&x, self.config.patch_size)?;
        Ok((self.embed.forward(ctx, &patches)?, grid))
    }

    /// Raw complex output `[K', F']` on the padded grid.
    pub fn raw_output(&self, ctx: &Ctx, spec: &CVar) -> Result<(CVar, PaddedGrid)> {
        let (mut x, grid) = self.patch_embed(ctx, spec)?;
        let mut skips = Vec::new();
        for (i, (stage, merge)) in self.encoder.iter().zip(&self.merges).enumerate() {
            x = in_stage(&format!("encoder stage {i}"), || run_blocks(ctx, stage, x))?;
            skips.push(x.clone());
            x = merge.forward(ctx, &x)?;
        }
        x = in_stage("bottleneck", || run_blocks(ctx, &self.bottleneck, x))?;
        let levels = skips.len();
        for (j, (stage, skip)) in self.decoder.iter().zip(skips.iter().rev()).enumerate() {
            x = in_stage(&format!("decoder stage {}", levels - 1 - j), || {
                let y = stage.expand.forward(ctx, &x)?;
                let y = stage.fuse.forward(ctx, &CVar::concat(&[y, skip.clone()], 3)?)?;
                run_blocks(ctx, &stage.blocks, y)
            })?;
        }
        let out = in_stage("head", || {
            let y = self.final_norm.forward(ctx, &x)?;
            let y = pixel_shuffle(&self.final_expand.forward(ctx, &y)?, self.config.patch_size)?;
            self.head.forward(ctx, &y)?.reshape(&[grid.padded_frames, grid.padded_bins])
        })?;
        Ok((out, grid))
    }

    /// `spec: [K, F]` on the context's tape.
    pub fn forward(&self, ctx: &Ctx, spec: &CVar) -> Result<SpectralOutput> {
        let (raw, grid) = self.raw_output(ctx, spec)?;
        let raw = grid.unpad(&raw)?;
        if self.config.mask_connection {
            let mask = bounded_mask(&raw)?;
            Ok(SpectralOutput {
                estimate: mask.mul(spec)?,
                raw,
                mask: Some(mask),
            })
        } else {
            Ok(SpectralOutput {
                estimate: raw.clone(),
                raw,
                mask: None,
            })
        }
    }

    /// Inference on a plain spectrogram.
    pub fn enhance(&self, store: &ParamStore, spec: &Spectrogram) -> Result<(Spectrogram, Option<ComplexMask>)> {
        let ctx = Ctx::eval(store);
        let out = self.forward(&ctx, &spec.to_cvar(ctx.tape()))?;
        let est = Spectrogram::from_cvar(&out.estimate, spec.config(), spec.sample_rate())?;
        let mask = out.mask.map(|m| ComplexMask {
            re: m.re.value(),
            im: m.im.value(),
        });
        Ok((est, mask))
    }

    /// Names of every block's output projections.
    pub fn output_projection_prefixes(&self) -> Vec<String> {
        self.encoder
            .iter()
            .flatten()
            .chain(&self.bottleneck)
            .chain(self.decoder.iter().flat_map(|d| &d.blocks))
            .flat_map(Cstb::output_projection_prefixes)
            .collect()
    }
}

/// `|z|` for the values of a complex tape variable.
pub fn magnitudes(z: &CVar) -> Vec<f64> {
    let (re, im) = z.values();
    re.data().iter().zip(im.data()).map(|(a, b)| a.hypot(*b)).collect()
}

#[cfg(test)]
mod tests;
