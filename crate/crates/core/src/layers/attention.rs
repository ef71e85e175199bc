//! Complex (shifted-)window multi-head self-attention.
//!
//! Scores are real: `Re(q·kᵀ)/√d_h` (or `|q·kᵀ|/√d_h` in `abs` mode) plus
//! a learned relative-position bias and the shift mask. A real softmax over
//! them mixes the complex values. On real inputs this is exactly standard
//! windowed attention.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, ComplexLinear};
use crate::autodiff::Var;
use crate::complex::CVar;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Logit applied before the real softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScore {
    /// `Re(q·kᵀ)`
    #[default]
    Re,
    /// `|q·kᵀ|`
    Abs,
}

const MASKED: f64 = -1e9;

fn grid_dims(x: &CVar) -> Result<(usize, usize, usize, usize)> {
    match x.shape()[..] {
        [b, h, w, c] => Ok((b, h, w, c)),
        ref s => Err(Error::InvalidShape {
            op: "window_partition",
            detail: format!("expected [batch, height, width, channels], got {s:?}"),
        }),
    }
}

fn check_divisible(h: usize, w: usize, win: usize, shift: usize) -> Result<()> {
    if win == 0 || !h.is_multiple_of(win) || !w.is_multiple_of(win) || (shift != 0 && shift >= win) {
        return Err(Error::InvalidShape {
            op: "window_partition",
            detail: format!("grid {h}x{w} with window {win}, shift {shift}"),
        });
    }
    Ok(())
}

/// `[B, Hg, Wg, C] -> [B·nW, w², C]`, after a cyclic roll by `(−shift, −shift)`.
///
/// Windows are ordered row-major within each batch item.
pub fn window_partition(x: &CVar, win: usize, shift: usize) -> Result<CVar> {
    let (b, hg, wg, c) = grid_dims(x)?;
    check_divisible(hg, wg, win, shift)?;
    let (nh, nw) = (hg / win, wg / win);
    let mut idx = Vec::with_capacity(b * hg * wg * c);
    for bi in 0..b {
        for wh in 0..nh {
            for ww in 0..nw {
                for i in 0..win {
                    let h = (wh * win + i + shift) % hg;
                    for j in 0..win {
                        let w = (ww * win + j + shift) % wg;
                        let base = ((bi * hg + h) * wg + w) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    x.gather(idx.into(), &[b * nh * nw, win * win, c])
}

/// Inverse of [`window_partition`]: `[B·nW, w², C] -> [B, Hg, Wg, C]`.
pub fn window_reverse(x: &CVar, win: usize, shift: usize, batch: usize, hg: usize, wg: usize) -> Result<CVar> {
    check_divisible(hg, wg, win, shift)?;
    let c = *x.shape().last().unwrap_or(&0);
    let (nh, nw) = (hg / win, wg / win);
    if x.shape() != [batch * nh * nw, win * win, c] {
        return Err(Error::InvalidShape {
            op: "window_reverse",
            detail: format!("{:?} does not tile a {hg}x{wg} grid with window {win}", x.shape()),
        });
    }
    let mut idx = Vec::with_capacity(batch * hg * wg * c);
    for bi in 0..batch {
        for h in 0..hg {
            let p = (h + hg - shift % hg) % hg;
            for w in 0..wg {
                let q = (w + wg - shift % wg) % wg;
                let window = (bi * nh + p / win) * nw + q / win;
                let base = (window * win * win + (p % win) * win + q % win) * c;
                idx.extend(base..base + c);
            }
        }
    }
    x.gather(idx.into(), &[batch, hg, wg, c])
}

/// Row of the `[(2w−1)², H]` bias table for every query/key pair of a
/// window, as a flat `[w², w²]` array.
pub fn relative_position_index(win: usize) -> Vec<usize> {
    let t = win * win;
    let span = 2 * win - 1;
    let mut out = Vec::with_capacity(t * t);
    for a in 0..t {
        let (ai, aj) = (a / win, a % win);
        for b in 0..t {
            let (bi, bj) = (b / win, b % win);
            out.push((ai + win - 1 - bi) * span + (aj + win - 1 - bj));
        }
    }
    out
}

/// Additive mask `[nW, w², w²]` for the shifted grid: 0 between tokens that
/// were neighbours before the cyclic roll, −1e9 otherwise.
pub fn shift_mask(hg: usize, wg: usize, win: usize, shift: usize) -> Result<Tensor> {
    check_divisible(hg, wg, win, shift)?;
    let region = |pos: usize, len: usize| -> usize {
        if shift == 0 || pos < len - win {
            0
        } else if pos < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (hg / win, wg / win);
    let t = win * win;
    let mut data = Vec::with_capacity(nh * nw * t * t);
    for wh in 0..nh {
        for ww in 0..nw {
            let labels: Vec<usize> = (0..t)
                .map(|k| region(wh * win + k / win, hg) * 3 + region(ww * win + k % win, wg))
                .collect();
            for a in 0..t {
                for b in 0..t {
                    data.push(if labels[a] == labels[b] { 0.0 } else { MASKED });
                }
            }
        }
    }
    Tensor::new([nh * nw, t, t], data)
}

/// Attention weights `[Bw, H, T, T]` for `q, k: [Bw, H, T, d_h]`.
///
/// `bias` is `[H, T, T]`; `mask` is `[nW, T, T]` with `Bw` a multiple of
/// `nW` (windows of one batch item are contiguous).
pub fn attention_weights(q: &CVar, k: &CVar, bias: Option<&Var>, mask: Option<&Var>, score: AttentionScore) -> Result<Var> {
    let shape = q.shape();
    if shape.len() != 4 || k.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: shape,
            rhs: k.shape(),
        });
    }
    let (bw, heads, t, dh) = (shape[0], shape[1], shape[2], shape[3]);
    let kr = k.re.transpose_last()?;
    let ki = k.im.transpose_last()?;
    let re = q.re.matmul(&kr)?.sub(&q.im.matmul(&ki)?)?;
    let raw = match score {
        AttentionScore::Re => re,
        AttentionScore::Abs => {
            let im = q.re.matmul(&ki)?.add(&q.im.matmul(&kr)?)?;
            re.square().add(&im.square())?.offset(1e-12).sqrt()
        }
    };
    let mut logits = raw.scale(1.0 / (dh as f64).sqrt());
    if let Some(b) = bias {
        logits = logits.add(b)?;
    }
    if let Some(m) = mask {
        let nw = m.shape()[0];
        if nw == 0 || bw % nw != 0 {
            return Err(Error::ShapeMismatch {
                op: "attention mask",
                lhs: vec![bw, heads, t, t],
                rhs: m.shape(),
            });
        }
        logits = logits
            .reshape(&[bw / nw, nw, heads, t, t])?
            .add(&m.reshape(&[nw, 1, t, t])?)?
            .reshape(&[bw, heads, t, t])?;
    }
    let bad = logits.with_value(|v| v.iter().position(|x| x.is_nan() || *x == f64::INFINITY));
    if let Some(i) = bad {
        return Err(Error::NonFinite {
            location: format!("attention logits (window {}, head {})", i / (heads * t * t), (i / (t * t)) % heads),
            index: i,
        });
    }
    Ok(logits.softmax())
}

/// Real weights `[.., T, T]` times complex values `[.., T, d]`.
pub fn mix_values(weights: &Var, v: &CVar) -> Result<CVar> {
    Ok(CVar {
        re: weights.matmul(&v.re)?,
        im: weights.matmul(&v.im)?,
    })
}

/// W-MSA (`shift = 0`) or SW-MSA (`shift = window/2`) over a token grid.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    pub score: AttentionScore,
    pub q: ComplexLinear,
    pub k: ComplexLinear,
    pub v: ComplexLinear,
    pub out: ComplexLinear,
}

impl WindowAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        shift: usize,
        score: AttentionScore,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{dim} channels not divisible into {heads} heads")));
        }
        if window == 0 || (shift != 0 && shift >= window) {
            return Err(Error::Config(format!("window {window} with shift {shift}")));
        }
        let span = 2 * window - 1;
        store.insert(join(name, "rel_bias"), Tensor::randn([span * span, heads], 0.02, rng))?;
        Ok(WindowAttention {
            name: name.to_string(),
            dim,
            heads,
            window,
            shift,
            score,
            q: ComplexLinear::new(store, &join(name, "q"), dim, dim, true, rng)?,
            // Under the `re` score a key bias shifts every logit of a query
            // row equally, so softmax cancels it.
            k: ComplexLinear::new(store, &join(name, "k"), dim, dim, score == AttentionScore::Abs, rng)?,
            v: ComplexLinear::new(store, &join(name, "v"), dim, dim, true, rng)?,
            out: ComplexLinear::new(store, &join(name, "out"), dim, dim, true, rng)?,
        })
    }

    /// `[H, T, T]` bias gathered from the table.
    pub fn position_bias(&self, ctx: &Ctx) -> Result<Var> {
        let table = ctx.param(&join(&self.name, "rel_bias"))?;
        let rel = relative_position_index(self.window);
        let t = self.window * self.window;
        let h = self.heads;
        let mut idx = Vec::with_capacity(h * t * t);
        for head in 0..h {
            idx.extend(rel.iter().map(|r| r * h + head));
        }
        let idx: Rc<[usize]> = idx.into();
        table.gather(idx, &[h, t, t])
    }

    fn heads_first(&self, x: &CVar, bw: usize, t: usize) -> Result<CVar> {
        x.reshape(&[bw, t, self.heads, self.dim / self.heads])?.permute(&[0, 2, 1, 3])
    }

    /// Attention weights for a grid `x: [B, Hg, Wg, C]`.
    pub fn weights(&self, ctx: &Ctx, x: &CVar) -> Result<(Var, CVar)> {
        let (_, hg, wg, _) = grid_dims(x)?;
        let xs = window_partition(x, self.window, self.shift)?;
        let (bw, t) = (xs.shape()[0], xs.shape()[1]);
        let q = self.heads_first(&self.q.forward(ctx, &xs)?, bw, t)?;
        let k = self.heads_first(&self.k.forward(ctx, &xs)?, bw, t)?;
        let v = self.heads_first(&self.v.forward(ctx, &xs)?, bw, t)?;
        let bias = self.position_bias(ctx)?;
        let mask = if self.shift > 0 {
            Some(ctx.tape().constant(shift_mask(hg, wg, self.window, self.shift)?))
        } else {
            None
        };
        let w = attention_weights(&q, &k, Some(&bias), mask.as_ref(), self.score)?;
        Ok((w, v))
    }

    pub fn forward(&self, ctx: &Ctx, x: &CVar) -> Result<CVar> {
        let (b, hg, wg, c) = grid_dims(x)?;
        if c != self.dim {
            return Err(Error::ShapeMismatch {
                op: "window_attention",
                lhs: x.shape(),
                rhs: vec![self.dim],
            });
        }
        let (w, v) = self.weights(ctx, x)?;
        let (bw, t) = (w.shape()[0], w.shape()[2]);
        let mixed = mix_values(&w, &v)?.permute(&[0, 2, 1, 3])?.reshape(&[bw, t, c])?;
        let y = self.out.forward(ctx, &mixed)?;
        window_reverse(&y, self.window, self.shift, b, hg, wg)
    }
}
