//! Complex Swin transformer block: a W-MSA unit followed by an SW-MSA unit.
//!
//! Each unit is pre-norm with residuals:
//! `ŷ = attn(cLN(y)) + y`, then `y' = MLP(cLN(ŷ)) + ŷ`.

use rand::Rng;

use super::{complex_dropout, complex_gelu, join, AttentionScore, ComplexLayerNorm, ComplexLinear, WindowAttention};
use crate::complex::CVar;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};

/// Two complex linear layers with a complex GELU between them.
#[derive(Debug, Clone)]
pub struct ComplexMlp {
    pub fc1: ComplexLinear,
    pub fc2: ComplexLinear,
    pub dropout: f64,
}

impl ComplexMlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(ComplexMlp {
            fc1: ComplexLinear::new(store, &join(name, "fc1"), dim, hidden, true, rng)?,
            fc2: ComplexLinear::new(store, &join(name, "fc2"), hidden, dim, true, rng)?,
            dropout,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &CVar) -> Result<CVar> {
        let h = complex_gelu(&self.fc1.forward(ctx, x)?);
        let h = complex_dropout(ctx, &h, self.dropout)?;
        let y = self.fc2.forward(ctx, &h)?;
        complex_dropout(ctx, &y, self.dropout)
    }
}

/// Hyperparameters shared by every unit of a stage.
#[derive(Debug, Clone, Copy)]
pub struct UnitSpec {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    pub score: AttentionScore,
    pub ln_eps: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct SwinUnit {
    pub norm1: ComplexLayerNorm,
    pub attn: WindowAttention,
    pub norm2: ComplexLayerNorm,
    pub mlp: ComplexMlp,
}

impl SwinUnit {
    pub fn new(store: &mut ParamStore, name: &str, spec: UnitSpec, shift: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(SwinUnit {
            norm1: ComplexLayerNorm::new(store, &join(name, "norm1"), spec.dim, spec.ln_eps)?,
            attn: WindowAttention::new(store, &join(name, "attn"), spec.dim, spec.heads, spec.window, shift, spec.score, rng)?,
            norm2: ComplexLayerNorm::new(store, &join(name, "norm2"), spec.dim, spec.ln_eps)?,
            mlp: ComplexMlp::new(store, &join(name, "mlp"), spec.dim, spec.dim * spec.mlp_ratio, spec.dropout, rng)?,
        })
    }

    /// `x: [B, Hg, Wg, C]`.
    pub fn forward(&self, ctx: &Ctx, x: &CVar) -> Result<CVar> {
        let a = self.attn.forward(ctx, &self.norm1.forward(ctx, x)?)?;
        let a = complex_dropout(ctx, &a, self.mlp.dropout)?;
        let y = a.add(x)?;
        self.mlp.forward(ctx, &self.norm2.forward(ctx, &y)?)?.add(&y)
    }
}

/// W-MSA unit then SW-MSA unit (shift of half a window).
#[derive(Debug, Clone)]
pub struct Cstb {
    pub regular: SwinUnit,
    pub shifted: SwinUnit,
}

impl Cstb {
    pub fn new(store: &mut ParamStore, name: &str, spec: UnitSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(Cstb {
            regular: SwinUnit::new(store, &join(name, "wmsa"), spec, 0, rng)?,
            shifted: SwinUnit::new(store, &join(name, "swmsa"), spec, spec.window / 2, rng)?,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &CVar) -> Result<CVar> {
        self.shifted.forward(ctx, &self.regular.forward(ctx, x)?)
    }

    /// Names of the two output projections whose zeroing makes the block
    /// an identity map.
    pub fn output_projection_prefixes(&self) -> Vec<String> {
        [&self.regular, &self.shifted]
            .iter()
            .flat_map(|u| [u.attn.out.name.clone(), u.mlp.fc2.name.clone()])
            .collect()
    }
}
