//! Real and complex convolutions built from gather/scatter and matmul.
//!
//! A forward convolution gathers input patches into columns (`im2col`) and
//! multiplies by the flattened kernel. The transposed convolution multiplies
//! first and scatter-adds the columns back, using the same index pattern,
//! which makes it the exact adjoint of the forward one.

use std::rc::Rc;

use crate::autodiff::{Var, PAD_INDEX};
use crate::complex::CVar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv1dGeometry {
    fn default() -> Self {
        Conv1dGeometry {
            stride: 1,
            padding: 0,
        }
    }
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

fn dims3(x: &Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape()[..] {
        [a, b, c] => Ok((a, b, c)),
        ref s => Err(Error::InvalidShape {
            op,
            detail: format!("expected 3 axes, got {s:?}"),
        }),
    }
}

/// Column indices for `[batch, l_out, c_in·k]`.
fn im2col_1d(batch: usize, c_in: usize, len: usize, k: usize, l_out: usize, g: Conv1dGeometry) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(batch * l_out * c_in * k);
    for b in 0..batch {
        for lo in 0..l_out {
            for ci in 0..c_in {
                for kk in 0..k {
                    let pos = (lo * g.stride + kk) as isize - g.padding as isize;
                    if pos < 0 || pos as usize >= len {
                        idx.push(PAD_INDEX);
                    } else {
                        idx.push((b * c_in + ci) * len + pos as usize);
                    }
                }
            }
        }
    }
    idx.into()
}

struct Cols1d {
    cols: Var,
    batch: usize,
    l_out: usize,
}

fn cols_1d(x: &Var, c_out_in_k: (usize, usize, usize), g: Conv1dGeometry, op: &'static str) -> Result<Cols1d> {
    let (batch, c_in, len) = dims3(x, op)?;
    let (_, w_in, k) = c_out_in_k;
    if w_in != c_in {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape(),
            rhs: vec![c_out_in_k.0, w_in, k],
        });
    }
    let l_out = conv_out_len(len, k, g.stride, g.padding).ok_or_else(|| Error::InvalidShape {
        op,
        detail: format!("kernel {k} larger than padded input {}", len + 2 * g.padding),
    })?;
    let idx = im2col_1d(batch, c_in, len, k, l_out, g);
    let cols = x.gather(idx, &[batch, l_out, c_in * k])?;
    Ok(Cols1d { cols, batch, l_out })
}

fn kernel_dims(w: &Var, op: &'static str) -> Result<(usize, usize, usize)> {
    dims3(w, op)
}

/// Applies the flattened kernel to gathered columns: `[B, L, Cin·K] -> [B, Cout, L]`.
fn apply_kernel(cols: &Var, w: &Var, c_out: usize, batch: usize, l_out: usize) -> Result<Var> {
    let flat = w.reshape(&[c_out, w.numel() / c_out])?.transpose_last()?;
    let out = cols.matmul(&flat)?;
    out.permute(&[0, 2, 1])?.reshape(&[batch, c_out, l_out])
}

/// `x: [batch, c_in, len]`, `w: [c_out, c_in, k]`, `bias: [c_out]`.
pub fn conv1d(x: &Var, w: &Var, bias: Option<&Var>, g: Conv1dGeometry) -> Result<Var> {
    let (c_out, c_in, k) = kernel_dims(w, "conv1d")?;
    let c = cols_1d(x, (c_out, c_in, k), g, "conv1d")?;
    let out = apply_kernel(&c.cols, w, c_out, c.batch, c.l_out)?;
    match bias {
        Some(b) => out.add(&b.reshape(&[c_out, 1])?),
        None => Ok(out),
    }
}

/// Transposed 1-D convolution, the adjoint of [`conv1d`] with the same
/// kernel array. `x: [batch, c_in, len]`, `w: [c_in, c_out, k]`; output
/// length `(len − 1)·stride + k − 2·padding`.
pub fn conv_transpose1d(x: &Var, w: &Var, bias: Option<&Var>, g: Conv1dGeometry) -> Result<Var> {
    let (batch, c_in, len) = dims3(x, "conv_transpose1d")?;
    let (w_in, c_out, k) = kernel_dims(w, "conv_transpose1d")?;
    if w_in != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose1d",
            lhs: x.shape(),
            rhs: w.shape(),
        });
    }
    let full = (len - 1) * g.stride + k;
    if full <= 2 * g.padding {
        return Err(Error::InvalidShape {
            op: "conv_transpose1d",
            detail: format!("padding {} consumes the whole output", g.padding),
        });
    }
    let out_len = full - 2 * g.padding;
    // [B, L, Cin] · [Cin, Cout·K] -> [B, L, Cout·K]
    let cols = x.permute(&[0, 2, 1])?.matmul(&w.reshape(&[c_in, c_out * k])?)?;
    let mut idx = Vec::with_capacity(batch * len * c_out * k);
    for b in 0..batch {
        for l in 0..len {
            for co in 0..c_out {
                for kk in 0..k {
                    let pos = (l * g.stride + kk) as isize - g.padding as isize;
                    if pos < 0 || pos as usize >= out_len {
                        idx.push(PAD_INDEX);
                    } else {
                        idx.push((b * c_out + co) * out_len + pos as usize);
                    }
                }
            }
        }
    }
    let out = cols.scatter_add(idx.into(), &[batch, c_out, out_len])?;
    match bias {
        Some(b) => out.add(&b.reshape(&[c_out, 1])?),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dGeometry {
    fn default() -> Self {
        Conv2dGeometry {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

struct Cols2d {
    cols: Var,
    batch: usize,
    h_out: usize,
    w_out: usize,
}

fn cols_2d(x: &Var, w_shape: &[usize], g: Conv2dGeometry) -> Result<Cols2d> {
    let (batch, c_in, h, wd) = match x.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        ref s => {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("input must be [batch, channels, height, width], got {s:?}"),
            })
        }
    };
    let (kc, kh, kw) = match w_shape {
        [_, b, c, d] => (*b, *c, *d),
        s => {
            return Err(Error::InvalidShape {
                op: "conv2d",
                detail: format!("kernel must be [out, in, kh, kw], got {s:?}"),
            })
        }
    };
    if kc != c_in {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape(),
            rhs: w_shape.to_vec(),
        });
    }
    let too_big = || Error::InvalidShape {
        op: "conv2d",
        detail: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * g.padding.0, wd + 2 * g.padding.1),
    };
    let h_out = conv_out_len(h, kh, g.stride.0, g.padding.0).ok_or_else(too_big)?;
    let w_out = conv_out_len(wd, kw, g.stride.1, g.padding.1).ok_or_else(too_big)?;
    let mut idx = Vec::with_capacity(batch * h_out * w_out * c_in * kh * kw);
    for b in 0..batch {
        for ho in 0..h_out {
            for wo in 0..w_out {
                for ci in 0..c_in {
                    for i in 0..kh {
                        for j in 0..kw {
                            let y = (ho * g.stride.0 + i) as isize - g.padding.0 as isize;
                            let xx = (wo * g.stride.1 + j) as isize - g.padding.1 as isize;
                            if y < 0 || xx < 0 || y as usize >= h || xx as usize >= wd {
                                idx.push(PAD_INDEX);
                            } else {
                                idx.push(((b * c_in + ci) * h + y as usize) * wd + xx as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    let cols = x.gather(idx.into(), &[batch, h_out * w_out, c_in * kh * kw])?;
    Ok(Cols2d {
        cols,
        batch,
        h_out,
        w_out,
    })
}

fn apply_kernel_2d(c: &Cols2d, w: &Var) -> Result<Var> {
    let c_out = w.shape()[0];
    let out = apply_kernel(&c.cols, w, c_out, c.batch, c.h_out * c.w_out)?;
    out.reshape(&[c.batch, c_out, c.h_out, c.w_out])
}

/// Real 2-D convolution. `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`.
pub fn conv2d(x: &Var, w: &Var, bias: Option<&Var>, g: Conv2dGeometry) -> Result<Var> {
    let c = cols_2d(x, &w.shape(), g)?;
    let out = apply_kernel_2d(&c, w)?;
    match bias {
        Some(b) => out.add(&b.reshape(&[w.shape()[0], 1, 1])?),
        None => Ok(out),
    }
}

/// Complex 2-D convolution with kernel `W = A + iB` on `h = x + iy`:
/// `(A∗x − B∗y) + i(B∗x + A∗y)`.
pub fn cconv2d(x: &CVar, w: &CVar, bias: Option<&CVar>, g: Conv2dGeometry) -> Result<CVar> {
    let w_shape = w.shape();
    let cr = cols_2d(&x.re, &w_shape, g)?;
    let ci = cols_2d(&x.im, &w_shape, g)?;
    let re = apply_kernel_2d(&cr, &w.re)?.sub(&apply_kernel_2d(&ci, &w.im)?)?;
    let im = apply_kernel_2d(&cr, &w.im)?.add(&apply_kernel_2d(&ci, &w.re)?)?;
    let out = CVar::new(re, im)?;
    match bias {
        Some(b) => out.add(&b.reshape(&[w_shape[0], 1, 1])?),
        None => Ok(out),
    }
}

/// Complex 1-D convolution, same algebra as [`cconv2d`].
pub fn cconv1d(x: &CVar, w: &CVar, bias: Option<&CVar>, g: Conv1dGeometry) -> Result<CVar> {
    let re = conv1d(&x.re, &w.re, None, g)?.sub(&conv1d(&x.im, &w.im, None, g)?)?;
    let im = conv1d(&x.re, &w.im, None, g)?.add(&conv1d(&x.im, &w.re, None, g)?)?;
    let out = CVar::new(re, im)?;
    match bias {
        Some(b) => out.add(&b.reshape(&[w.shape()[0], 1])?),
        None => Ok(out),
    }
}

/// Complex transposed 1-D convolution.
pub fn cconv_transpose1d(x: &CVar, w: &CVar, bias: Option<&CVar>, g: Conv1dGeometry) -> Result<CVar> {
    let re = conv_transpose1d(&x.re, &w.re, None, g)?.sub(&conv_transpose1d(&x.im, &w.im, None, g)?)?;
    let im = conv_transpose1d(&x.re, &w.im, None, g)?.add(&conv_transpose1d(&x.im, &w.re, None, g)?)?;
    let out = CVar::new(re, im)?;
    match bias {
        Some(b) => out.add(&b.reshape(&[w.shape()[1], 1])?),
        None => Ok(out),
    }
}
