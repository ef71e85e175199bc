//! Neural layers: complex ones for the spectral branch, real ones for the
//! temporal branch.
//!
//! A layer is built against a [`ParamStore`], registering its initial
//! parameters under a name prefix, and afterwards only holds those names.

mod attention;
mod cstb;

pub use attention::{
    attention_weights, mix_values, relative_position_index, shift_mask, window_partition, window_reverse, AttentionScore,
    WindowAttention,
};
pub use cstb::{ComplexMlp, Cstb, SwinUnit, UnitSpec};

use rand::distributions::Distribution;
use rand::Rng;
use rand_distr::Bernoulli;

use crate::autodiff::Var;
use crate::complex::CVar;
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

fn join(prefix: &str, name: &str) -> String {
    format!("{prefix}.{name}")
}

fn check_last(x_shape: &[usize], want: usize, op: &'static str) -> Result<()> {
    match x_shape.last() {
        Some(&d) if d == want => Ok(()),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: x_shape.to_vec(),
            rhs: vec![want],
        }),
    }
}

/// `x: [..., in] · wᵀ` with `w: [out, in]`, flattening leading axes so the
/// weight is a shared right-hand side.
fn linear_real(x: &Var, w: &Var) -> Result<Var> {
    let shape = x.shape();
    let (d_in, d_out) = (w.shape()[1], w.shape()[0]);
    check_last(&shape, d_in, "linear")?;
    let rows = x.numel() / d_in;
    let y = x.reshape(&[rows, d_in])?.matmul(&w.transpose_last()?)?;
    let mut out_shape = shape;
    *out_shape.last_mut().expect("checked above") = d_out;
    y.reshape(&out_shape)
}

/// Complex affine map over the last axis: `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct ComplexLinear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl ComplexLinear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        // E|w|² = 1/d_in keeps activations at unit scale.
        let std = (0.5 / d_in as f64).sqrt();
        store.insert(join(name, "weight_re"), Tensor::randn([d_out, d_in], std, rng))?;
        store.insert(join(name, "weight_im"), Tensor::randn([d_out, d_in], std, rng))?;
        if bias {
            // Small random biases keep tokens that start out exactly zero
            // (zero-padded regions) away from the LayerNorm singularity.
            store.insert(join(name, "bias_re"), Tensor::randn([d_out], std, rng))?;
            store.insert(join(name, "bias_im"), Tensor::randn([d_out], std, rng))?;
        }
        Ok(ComplexLinear {
            name: name.to_string(),
            d_in,
            d_out,
            bias,
        })
    }

    pub fn weight(&self, ctx: &Ctx) -> Result<CVar> {
        CVar::new(ctx.param(&join(&self.name, "weight_re"))?, ctx.param(&join(&self.name, "weight_im"))?)
    }

    pub fn forward(&self, ctx: &Ctx, x: &CVar) -> Result<CVar> {
        let w = self.weight(ctx)?;
        let re = linear_real(&x.re, &w.re)?.sub(&linear_real(&x.im, &w.im)?)?;
        let im = linear_real(&x.re, &w.im)?.add(&linear_real(&x.im, &w.re)?)?;
        let y = CVar::new(re, im)?;
        if self.bias {
            let b = CVar::new(ctx.param(&join(&self.name, "bias_re"))?, ctx.param(&join(&self.name, "bias_im"))?)?;
            y.add(&b)
        } else {
            Ok(y)
        }
    }
}

/// Complex layer normalization over the last axis.
///
/// Centers by the complex mean, divides by `sqrt(Var(re) + Var(im) + eps)`,
/// then applies a complex affine `γ·n + β`.
#[derive(Debug, Clone)]
pub struct ComplexLayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl ComplexLayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        store.insert(join(name, "gamma_re"), Tensor::full([dim], 1.0))?;
        store.insert(join(name, "gamma_im"), Tensor::zeros([dim]))?;
        store.insert(join(name, "beta_re"), Tensor::zeros([dim]))?;
        store.insert(join(name, "beta_im"), Tensor::zeros([dim]))?;
        Ok(ComplexLayerNorm {
            name: name.to_string(),
            dim,
            eps,
        })
    }

    /// The pre-affine output.
    pub fn normalize(&self, x: &CVar) -> Result<CVar> {
        let shape = x.shape();
        check_last(&shape, self.dim, "complex_layer_norm")?;
        let axis = shape.len() - 1;
        let c = x.sub(&x.mean_axis(axis)?)?;
        let var = c.abs_sq().mean_axis(axis)?;
        let inv = var.offset(self.eps).sqrt().recip();
        c.mul_real(&inv)
    }

    pub fn forward(&self, ctx: &Ctx, x: &CVar) -> Result<CVar> {
        let n = self.normalize(x)?;
        let gamma = CVar::new(ctx.param(&join(&self.name, "gamma_re"))?, ctx.param(&join(&self.name, "gamma_im"))?)?;
        let beta = CVar::new(ctx.param(&join(&self.name, "beta_re"))?, ctx.param(&join(&self.name, "beta_im"))?)?;
        n.mul(&gamma)?.add(&beta)
    }
}

/// GELU applied separately to the real and imaginary parts.
pub fn complex_gelu(z: &CVar) -> CVar {
    CVar {
        re: z.re.gelu(),
        im: z.im.gelu(),
    }
}

/// Inverted dropout with one Bernoulli mask shared by both parts, so kept
/// entries keep their phase.
pub fn complex_dropout(ctx: &Ctx, z: &CVar, p: f64) -> Result<CVar> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
    }
    if !ctx.training() || p == 0.0 {
        return Ok(z.clone());
    }
    let keep = Bernoulli::new(1.0 - p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let scale = 1.0 / (1.0 - p);
    let shape = z.shape();
    let mask: Vec<f64> = {
        let mut rng = ctx.rng();
        (0..z.re.numel()).map(|_| if keep.sample(&mut *rng) { scale } else { 0.0 }).collect()
    };
    let m = ctx.tape().constant(Tensor::new(shape, mask)?);
    z.mul_real(&m)
}

/// Real affine map over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub d_in: usize,
    pub d_out: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_bias(store, name, d_in, d_out, true, rng)
    }

    pub fn with_bias(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        store.insert(join(name, "weight"), Tensor::uniform([d_out, d_in], -bound, bound, rng))?;
        if bias {
            store.insert(join(name, "bias"), Tensor::zeros([d_out]))?;
        }
        Ok(Linear {
            name: name.to_string(),
            d_in,
            d_out,
            bias,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let y = linear_real(x, &ctx.param(&join(&self.name, "weight"))?)?;
        if self.bias {
            y.add(&ctx.param(&join(&self.name, "bias"))?)
        } else {
            Ok(y)
        }
    }
}

/// Real layer normalization over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        store.insert(join(name, "gamma"), Tensor::full([dim], 1.0))?;
        store.insert(join(name, "beta"), Tensor::zeros([dim]))?;
        Ok(LayerNorm {
            name: name.to_string(),
            dim,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let shape = x.shape();
        check_last(&shape, self.dim, "layer_norm")?;
        let axis = shape.len() - 1;
        let c = x.sub(&x.mean_axis(axis)?)?;
        let inv = c.square().mean_axis(axis)?.offset(self.eps).sqrt().recip();
        let gamma = ctx.param(&join(&self.name, "gamma"))?;
        let beta = ctx.param(&join(&self.name, "beta"))?;
        c.mul(&inv)?.mul(&gamma)?.add(&beta)
    }
}

/// Parametric ReLU with one learned negative slope.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub name: String,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str) -> Result<Self> {
        store.insert(join(name, "alpha"), Tensor::from_vec(vec![0.25]))?;
        Ok(PRelu { name: name.to_string() })
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let a = ctx.param(&join(&self.name, "alpha"))?;
        x.relu().sub(&x.neg().relu().mul(&a)?)
    }
}

/// Unidirectional single-layer GRU with zero initial state.
#[derive(Debug, Clone)]
pub struct Gru {
    pub name: String,
    pub d_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let k = 1.0 / (hidden as f64).sqrt();
        store.insert(join(name, "w_ih"), Tensor::uniform([3 * hidden, d_in], -k, k, rng))?;
        store.insert(join(name, "w_hh"), Tensor::uniform([3 * hidden, hidden], -k, k, rng))?;
        store.insert(join(name, "b_ih"), Tensor::uniform([3 * hidden], -k, k, rng))?;
        store.insert(join(name, "b_hh"), Tensor::uniform([3 * hidden], -k, k, rng))?;
        Ok(Gru {
            name: name.to_string(),
            d_in,
            hidden,
        })
    }

    /// `x: [batch, steps, d_in] -> [batch, steps, hidden]`.
    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let gi = linear_real(x, &ctx.param(&join(&self.name, "w_ih"))?)?.add(&ctx.param(&join(&self.name, "b_ih"))?)?;
        crate::autodiff::gru_recurrence(&gi, &ctx.param(&join(&self.name, "w_hh"))?, &ctx.param(&join(&self.name, "b_hh"))?)
    }
}
