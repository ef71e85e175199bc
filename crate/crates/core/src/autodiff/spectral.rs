//! Real FFT and its inverse as tape operations.
//!
//! Layout: a real frame `[..., n]` maps to `[..., 2, n/2 + 1]`, real parts
//! then imaginary parts. The forward transform is unnormalized; the inverse
//! carries the `1/n`.

use realfft::num_complex::Complex;
use realfft::RealFftPlanner;

use super::{Op, Var};
use crate::error::{Error, Result};

fn frame_len(shape: &[usize], op: &'static str) -> Result<usize> {
    match shape.last() {
        Some(&n) if n >= 2 && n % 2 == 0 => Ok(n),
        _ => Err(Error::InvalidShape {
            op,
            detail: format!("need an even last axis, got {shape:?}"),
        }),
    }
}

/// One-sided DFT of each length-`n` row.
pub(crate) fn rfft_rows(x: &[f64], n: usize) -> Vec<f64> {
    let bins = n / 2 + 1;
    let rows = x.len() / n;
    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut input = fft.make_input_vec();
    let mut spec = fft.make_output_vec();
    let mut out = vec![0.0; rows * 2 * bins];
    for r in 0..rows {
        input.copy_from_slice(&x[r * n..(r + 1) * n]);
        fft.process(&mut input, &mut spec).expect("buffer sizes match the plan");
        let dst = &mut out[r * 2 * bins..(r + 1) * 2 * bins];
        for (k, c) in spec.iter().enumerate() {
            dst[k] = c.re;
            dst[bins + k] = c.im;
        }
    }
    out
}

/// Inverse of [`rfft_rows`] (imaginary parts of DC and Nyquist are ignored).
pub(crate) fn irfft_rows(x: &[f64], n: usize) -> Vec<f64> {
    let bins = n / 2 + 1;
    let rows = x.len() / (2 * bins);
    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut spec = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut out = vec![0.0; rows * n];
    let norm = 1.0 / n as f64;
    for r in 0..rows {
        let src = &x[r * 2 * bins..(r + 1) * 2 * bins];
        for k in 0..bins {
            spec[k] = Complex::new(src[k], src[bins + k]);
        }
        spec[0].im = 0.0;
        spec[bins - 1].im = 0.0;
        ifft.process(&mut spec, &mut output).expect("buffer sizes match the plan");
        for (d, v) in out[r * n..(r + 1) * n].iter_mut().zip(&output) {
            *d = v * norm;
        }
    }
    out
}

pub(super) fn rfft_backward(g: &[f64], n: usize) -> Vec<f64> {
    let bins = n / 2 + 1;
    let mut z = g.to_vec();
    for row in z.chunks_mut(2 * bins) {
        for k in 1..bins - 1 {
            row[k] *= 0.5;
            row[bins + k] *= 0.5;
        }
    }
    let mut dx = irfft_rows(&z, n);
    for v in dx.iter_mut() {
        *v *= n as f64;
    }
    dx
}

pub(super) fn irfft_backward(g: &[f64], n: usize) -> Vec<f64> {
    let bins = n / 2 + 1;
    let mut d = rfft_rows(g, n);
    let inv = 1.0 / n as f64;
    for row in d.chunks_mut(2 * bins) {
        for k in 0..bins {
            let c = if k == 0 || k == bins - 1 { inv } else { 2.0 * inv };
            row[k] *= c;
            row[bins + k] *= c;
        }
        row[bins] = 0.0;
        row[2 * bins - 1] = 0.0;
    }
    d
}

impl Var {
    /// One-sided real DFT over the last axis: `[..., n] -> [..., 2, n/2+1]`.
    pub fn rfft(&self) -> Result<Var> {
        let shape = self.shape();
        let n = frame_len(&shape, "rfft")?;
        let (value, rg) = {
            let nodes = self.tape.nodes();
            (rfft_rows(&nodes[self.id].value, n), nodes[self.id].requires_grad)
        };
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.extend([2, n / 2 + 1]);
        Ok(self.tape.push(out_shape, value, Op::Rfft { x: self.id, n }, rg))
    }

    /// Inverse of [`Var::rfft`]: `[..., 2, n/2+1] -> [..., n]`.
    pub fn irfft(&self, n: usize) -> Result<Var> {
        let shape = self.shape();
        let rank = shape.len();
        if n < 2 || !n.is_multiple_of(2) || rank < 2 || shape[rank - 2] != 2 || shape[rank - 1] != n / 2 + 1 {
            return Err(Error::InvalidShape {
                op: "irfft",
                detail: format!("shape {shape:?} for frame length {n}"),
            });
        }
        let (value, rg) = {
            let nodes = self.tape.nodes();
            (irfft_rows(&nodes[self.id].value, n), nodes[self.id].requires_grad)
        };
        let mut out_shape = shape[..rank - 2].to_vec();
        out_shape.push(n);
        Ok(self.tape.push(out_shape, value, Op::Irfft { x: self.id, n }, rg))
    }
}
