use std::rc::Rc;

use super::{Binary, Op, Unary, Var, PAD_INDEX};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

// Below this the closed form loses precision; the series is exact to ~1e-13.
const TANH_RATIO_SERIES: f64 = 1e-4;

pub(crate) fn tanh_ratio(s: f64) -> f64 {
    if s < TANH_RATIO_SERIES {
        1.0 - s / 3.0 + 2.0 * s * s / 15.0
    } else {
        let r = s.sqrt();
        r.tanh() / r
    }
}

pub(crate) fn tanh_ratio_grad(s: f64) -> f64 {
    if s < TANH_RATIO_SERIES {
        -1.0 / 3.0 + 4.0 * s / 15.0
    } else {
        let r = s.sqrt();
        let t = r.tanh();
        ((1.0 - t * t) / r - t / (r * r)) / (2.0 * r)
    }
}

impl Unary {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Scale(k) => k * x,
            Unary::Offset(k) => x + k,
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Exp => x.exp(),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Relu => x.max(0.0),
            Unary::Gelu => gelu(x),
            Unary::Abs => x.abs(),
            Unary::TanhRatio => tanh_ratio(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    pub(crate) fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Scale(k) => k,
            Unary::Offset(_) => 1.0,
            Unary::Square => 2.0 * x,
            Unary::Sqrt => 0.5 / y,
            Unary::Recip => -y * y,
            Unary::Exp => y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => gelu_grad(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::TanhRatio => tanh_ratio_grad(x),
        }
    }
}

/// Right-aligned broadcast of two shapes. Each aligned pair of extents must
/// be equal or contain a 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let ea = if d + a.len() >= rank { a[d + a.len() - rank] } else { 1 };
        let eb = if d + b.len() >= rank { b[d + b.len() - rank] } else { 1 };
        out[d] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat index of `out`, the flat index into a tensor of shape
/// `shape` broadcast up to `out`.
fn broadcast_map(out: &[usize], shape: &[usize]) -> Rc<[usize]> {
    let rank = out.len();
    let src_strides = strides(shape);
    let mut eff = vec![0usize; rank];
    for d in 0..shape.len() {
        let od = d + rank - shape.len();
        eff[od] = if shape[d] == 1 { 0 } else { src_strides[d] };
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += eff[d];
            if idx[d] < out[d] {
                break;
            }
            offset -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map.into()
}

impl Var {
    pub(crate) fn unary(&self, kind: Unary) -> Var {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let node = &nodes[self.id];
            let value: Vec<f64> = node.value.iter().map(|&x| kind.apply(x)).collect();
            (node.shape.clone(), value, node.requires_grad)
        };
        self.tape.push(shape, value, Op::Unary { x: self.id, kind }, rg)
    }

    fn binary(&self, other: &Var, kind: Binary) -> Result<Var> {
        self.check_same_tape(other)?;
        let (shape, value, amap, bmap, rg) = {
            let nodes = self.tape.nodes();
            let (na, nb) = (&nodes[self.id], &nodes[other.id]);
            let shape = broadcast_shape(&na.shape, &nb.shape).ok_or_else(|| Error::ShapeMismatch {
                op: match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                },
                lhs: na.shape.clone(),
                rhs: nb.shape.clone(),
            })?;
            let amap = (na.shape != shape).then(|| broadcast_map(&shape, &na.shape));
            let bmap = (nb.shape != shape).then(|| broadcast_map(&shape, &nb.shape));
            let f = match kind {
                Binary::Add => |x: f64, y: f64| x + y,
                Binary::Sub => |x: f64, y: f64| x - y,
                Binary::Mul => |x: f64, y: f64| x * y,
            };
            let (av, bv) = (&na.value, &nb.value);
            let value: Vec<f64> = match (&amap, &bmap) {
                (None, None) => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
                (None, Some(bm)) => av.iter().zip(bm.iter()).map(|(&x, &j)| f(x, bv[j])).collect(),
                (Some(am), None) => am.iter().zip(bv).map(|(&i, &y)| f(av[i], y)).collect(),
                (Some(am), Some(bm)) => am.iter().zip(bm.iter()).map(|(&i, &j)| f(av[i], bv[j])).collect(),
            };
            (shape, value, amap, bmap, na.requires_grad || nb.requires_grad)
        };
        Ok(self.tape.push(
            shape,
            value,
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
                amap,
                bmap,
            },
            rg,
        ))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Add)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Sub)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Binary::Mul)
    }

    pub fn neg(&self) -> Var {
        self.unary(Unary::Neg)
    }

    pub fn scale(&self, k: f64) -> Var {
        self.unary(Unary::Scale(k))
    }

    pub fn offset(&self, k: f64) -> Var {
        self.unary(Unary::Offset(k))
    }

    pub fn square(&self) -> Var {
        self.unary(Unary::Square)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Unary::Sqrt)
    }

    pub fn recip(&self) -> Var {
        self.unary(Unary::Recip)
    }

    pub fn exp(&self) -> Var {
        self.unary(Unary::Exp)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Unary::Sigmoid)
    }

    pub fn relu(&self) -> Var {
        self.unary(Unary::Relu)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var {
        self.unary(Unary::Gelu)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Var {
        self.unary(Unary::Abs)
    }

    /// `tanh(√s)/√s` applied to a nonnegative input `s`.
    pub fn tanh_ratio(&self) -> Var {
        self.unary(Unary::TanhRatio)
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self) -> Var {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let node = &nodes[self.id];
            (pairwise_sum(&node.value), node.requires_grad)
        };
        self.tape.push(vec![1], vec![value], Op::Sum { x: self.id }, rg)
    }

    pub fn mean(&self) -> Var {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::OutOfRange {
                op: "sum_axis",
                detail: format!("axis {axis} for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let node = &nodes[self.id];
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..len {
                    let src = &node.value[(o * len + a) * inner..(o * len + a + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            (out, node.requires_grad)
        };
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.tape.push(
            out_shape,
            value,
            Op::SumAxis {
                x: self.id,
                outer,
                axis: len,
                inner,
            },
            rg,
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let len = *self.shape().get(axis).unwrap_or(&1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / len))
    }

    /// Population variance along `axis` (kept with extent 1).
    pub fn var_axis(&self, axis: usize) -> Result<Var> {
        let centered = self.sub(&self.mean_axis(axis)?)?;
        centered.square().mean_axis(axis)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let node = &nodes[self.id];
            if numel(shape) != node.value.len() || shape.contains(&0) {
                return Err(Error::ShapeMismatch {
                    op: "reshape",
                    lhs: node.shape.clone(),
                    rhs: shape.to_vec(),
                });
            }
            (node.value.clone(), node.requires_grad)
        };
        Ok(self.tape.push(shape.to_vec(), value, Op::Reshape { x: self.id }, rg))
    }

    /// `out[i] = self.flat[idx[i]]`, or 0 where `idx[i] == PAD_INDEX`.
    pub fn gather(&self, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != idx.len() {
            return Err(Error::InvalidShape {
                op: "gather",
                detail: format!("{} indices for shape {shape:?}", idx.len()),
            });
        }
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let node = &nodes[self.id];
            let src = &node.value;
            let mut out = Vec::with_capacity(idx.len());
            for &j in idx.iter() {
                if j == PAD_INDEX {
                    out.push(0.0);
                } else if j < src.len() {
                    out.push(src[j]);
                } else {
                    return Err(Error::OutOfRange {
                        op: "gather",
                        detail: format!("index {j} into {} values", src.len()),
                    });
                }
            }
            (out, node.requires_grad)
        };
        Ok(self.tape.push(shape.to_vec(), value, Op::Gather { x: self.id, idx }, rg))
    }

    /// Adjoint of [`Var::gather`]: `out.flat[idx[i]] += self[i]`.
    pub fn scatter_add(&self, idx: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let node = &nodes[self.id];
            if node.value.len() != idx.len() {
                return Err(Error::InvalidShape {
                    op: "scatter_add",
                    detail: format!("{} indices for {} values", idx.len(), node.value.len()),
                });
            }
            let mut out = vec![0.0; numel(shape)];
            for (&j, &v) in idx.iter().zip(&node.value) {
                if j == PAD_INDEX {
                    continue;
                }
                let slot = out.get_mut(j).ok_or_else(|| Error::OutOfRange {
                    op: "scatter_add",
                    detail: format!("index {j} into shape {shape:?}"),
                })?;
                *slot += v;
            }
            (out, node.requires_grad)
        };
        Ok(self.tape.push(shape.to_vec(), value, Op::ScatterAdd { x: self.id, idx }, rg))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation {axes:?} for shape {shape:?}"
            )));
        }
        let src_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
        let idx = strided_indices(&out_shape, &perm_strides, 0);
        self.gather(idx, &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: "need at least 2 axes".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Entries `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() || start > end || end > shape[axis] || start == end {
            return Err(Error::OutOfRange {
                op: "slice",
                detail: format!("{start}..{end} on axis {axis} of {shape:?}"),
            });
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let st = strides(&shape);
        let idx = strided_indices(&out_shape, &st, start * st[axis]);
        self.gather(idx, &out_shape)
    }

    /// Zero padding along `axis`.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::OutOfRange {
                op: "pad",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        if before == 0 && after == 0 {
            return Ok(self.clone());
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let new_len = len + before + after;
        let mut idx = Vec::with_capacity(outer * new_len * inner);
        for o in 0..outer {
            for a in 0..new_len {
                for i in 0..inner {
                    if a < before || a >= before + len {
                        idx.push(PAD_INDEX);
                    } else {
                        idx.push((o * len + a - before) * inner + i);
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = new_len;
        self.gather(idx.into(), &out_shape)
    }

    /// Cyclic shift along `axis`: `out[i] = in[(i - shift) mod len]`.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Var> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::OutOfRange {
                op: "roll",
                detail: format!("axis {axis} of {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in 0..len {
                let src = (a as isize - shift).rem_euclid(len as isize) as usize;
                for i in 0..inner {
                    idx.push((o * len + src) * inner + i);
                }
            }
        }
        self.gather(idx.into(), &shape)
    }

    pub fn concat(xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::OutOfRange {
                op: "concat",
                detail: format!("axis {axis} of {base:?}"),
            });
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut widths = Vec::with_capacity(xs.len());
        let mut total_axis = 0;
        for x in xs {
            first.check_same_tape(x)?;
            let s = x.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            total_axis += s[axis];
            widths.push(s[axis] * inner);
        }
        let (value, rg) = {
            let nodes = first.tape.nodes();
            let row: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(outer * row);
            for o in 0..outer {
                for (x, &w) in xs.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[x.id].value[o * w..(o + 1) * w]);
                }
            }
            (out, xs.iter().any(|x| nodes[x.id].requires_grad))
        };
        let mut out_shape = base;
        out_shape[axis] = total_axis;
        Ok(first.tape.push(
            out_shape,
            value,
            Op::Concat {
                xs: xs.iter().map(|x| x.id).collect(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape();
        let total: usize = sizes.iter().sum();
        if axis >= shape.len() || total != shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "split sizes {sizes:?} on axis {axis} of {shape:?}"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(axis, start, start + s)?);
            start += s;
        }
        Ok(out)
    }

    /// Batched matrix product. `self` is `[..., m, k]`; `rhs` is either
    /// `[k, n]` (shared across the batch) or `[..., k, n]` with the same
    /// leading extents.
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.check_same_tape(rhs)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (value, rg) = {
            let nodes = self.tape.nodes();
            let (av, bv) = (&nodes[self.id].value, &nodes[rhs.id].value);
            let mut out = vec![0.0; batch * m * n];
            if shared_b {
                super::matmul_nn(batch * m, k, n, av, bv, &mut out);
            } else {
                for p in 0..batch {
                    super::matmul_nn(
                        m,
                        k,
                        n,
                        &av[p * m * k..(p + 1) * m * k],
                        &bv[p * k * n..(p + 1) * k * n],
                        &mut out[p * m * n..(p + 1) * m * n],
                    );
                }
            }
            (out, nodes[self.id].requires_grad || nodes[rhs.id].requires_grad)
        };
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        Ok(self.tape.push(
            out_shape,
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    /// Softmax over the last axis. Entries equal to `-inf` get weight 0.
    pub fn softmax(&self) -> Var {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes();
            let node = &nodes[self.id];
            let width = *node.shape.last().unwrap_or(&1);
            let mut out = node.value.clone();
            for row in out.chunks_mut(width.max(1)) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            (node.shape.clone(), out, node.requires_grad)
        };
        let width = *shape.last().unwrap_or(&1);
        self.tape.push(shape, value, Op::Softmax { x: self.id, width }, rg)
    }
}

/// Flat source indices for walking `out_shape` with the given source strides.
pub(crate) fn strided_indices(out_shape: &[usize], src_strides: &[usize], base: usize) -> Rc<[usize]> {
    let total = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = Vec::with_capacity(total);
    let mut pos = vec![0usize; rank];
    let mut offset = base;
    for _ in 0..total {
        idx.push(offset);
        for d in (0..rank).rev() {
            pos[d] += 1;
            offset += src_strides[d];
            if pos[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * pos[d];
            pos[d] = 0;
        }
    }
    idx.into()
}

/// Fixed-order pairwise summation.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        v.iter().sum()
    } else {
        let mid = v.len() / 2;
        pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
    }
}
