//! Short-time Fourier transform with reflect padding and its overlap-add
//! inverse, both as tape operations so losses can flow through them.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::audio::AudioClip;
use crate::autodiff::{Tape, Var, PAD_INDEX};
use crate::complex::CVar;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StftConfig {
    pub frame_size: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig { frame_size: 512, hop: 256 }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_size < 2 || !self.frame_size.is_multiple_of(2) || self.hop == 0 || self.hop > self.frame_size {
            return Err(Error::Config(format!(
                "stft frame {} / hop {} (frame must be even, 0 < hop <= frame)",
                self.frame_size, self.hop
            )));
        }
        Ok(())
    }

    /// One-sided bin count `F = frame/2 + 1`.
    pub fn bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    fn pad(&self) -> usize {
        self.frame_size / 2
    }

    /// Frame count `K` for a clip of `len` samples.
    pub fn frames(&self, len: usize) -> usize {
        (len + 2 * self.pad() - self.frame_size) / self.hop + 1
    }

    /// Longest signal an inverse over `frames` frames can rebuild.
    pub fn max_length(&self, frames: usize) -> usize {
        (frames - 1) * self.hop + self.frame_size - self.pad()
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Complex time-frequency grid `[K, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    re: Tensor,
    im: Tensor,
    config: StftConfig,
    sample_rate: u32,
}

impl Spectrogram {
    pub fn new(re: Tensor, im: Tensor, config: StftConfig, sample_rate: u32) -> Result<Self> {
        let ok = re.shape() == im.shape() && re.shape().len() == 2 && re.shape()[1] == config.bins();
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "spectrogram",
                lhs: re.shape().to_vec(),
                rhs: im.shape().to_vec(),
            });
        }
        Ok(Spectrogram {
            re,
            im,
            config,
            sample_rate,
        })
    }

    pub fn from_cvar(z: &CVar, config: StftConfig, sample_rate: u32) -> Result<Self> {
        let (re, im) = z.values();
        Spectrogram::new(re, im, config, sample_rate)
    }

    pub fn re(&self) -> &Tensor {
        &self.re
    }

    pub fn im(&self) -> &Tensor {
        &self.im
    }

    pub fn config(&self) -> StftConfig {
        self.config
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frames(&self) -> usize {
        self.re.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.re.shape()[1]
    }

    pub fn magnitude(&self) -> Tensor {
        let data = self.re.data().iter().zip(self.im.data()).map(|(a, b)| a.hypot(*b)).collect();
        Tensor::new(self.re.shape(), data).expect("same shape")
    }

    pub fn to_cvar(&self, tape: &Tape) -> CVar {
        CVar {
            re: tape.constant(self.re.clone()),
            im: tape.constant(self.im.clone()),
        }
    }
}

fn reflect(j: isize, len: usize) -> usize {
    let n = len as isize;
    let r = if j < 0 {
        -j
    } else if j >= n {
        2 * (n - 1) - j
    } else {
        j
    };
    r as usize
}

/// Differentiable STFT of a 1-D signal `x: [L]`, returning `[K, F]`.
pub fn stft_var(x: &Var, cfg: StftConfig) -> Result<CVar> {
    cfg.validate()?;
    let len = match x.shape()[..] {
        [l] => l,
        ref s => {
            return Err(Error::InvalidShape {
                op: "stft",
                detail: format!("expected a 1-D signal, got {s:?}"),
            })
        }
    };
    if len < cfg.frame_size {
        return Err(Error::Audio(format!("clip of {len} samples is shorter than one {}-sample frame", cfg.frame_size)));
    }
    let (n, k, pad) = (cfg.frame_size, cfg.frames(len), cfg.pad() as isize);
    let mut idx = Vec::with_capacity(k * n);
    for f in 0..k {
        for i in 0..n {
            idx.push(reflect((f * cfg.hop + i) as isize - pad, len));
        }
    }
    let frames = x.gather(idx.into(), &[k, n])?;
    let window = x.tape().constant(Tensor::from_vec(hann(n)));
    let spec = frames.mul(&window)?.rfft()?;
    let f = cfg.bins();
    Ok(CVar {
        re: spec.slice(1, 0, 1)?.reshape(&[k, f])?,
        im: spec.slice(1, 1, 2)?.reshape(&[k, f])?,
    })
}

/// Differentiable inverse: windowed overlap-add divided by the summed
/// squared window, trimmed to `length` samples.
pub fn istft_var(spec: &CVar, cfg: StftConfig, length: usize) -> Result<Var> {
    cfg.validate()?;
    let shape = spec.shape();
    let (k, f) = match shape[..] {
        [k, f] if f == cfg.bins() && k > 0 => (k, f),
        _ => {
            return Err(Error::InvalidShape {
                op: "istft",
                detail: format!("spectrogram {shape:?} for frame {}", cfg.frame_size),
            })
        }
    };
    let max = cfg.max_length(k);
    if length == 0 || length > max {
        return Err(Error::Audio(format!("cannot rebuild {length} samples from {k} frames (at most {max})")));
    }
    let n = cfg.frame_size;
    let stacked = Var::concat(&[spec.re.reshape(&[k, 1, f])?, spec.im.reshape(&[k, 1, f])?], 1)?;
    let win = hann(n);
    let frames = stacked.irfft(n)?.mul(&spec.tape().constant(Tensor::from_vec(win.clone())))?;
    let total = (k - 1) * cfg.hop + n;
    let mut idx = Vec::with_capacity(k * n);
    let mut wsum = vec![0.0; total];
    for fr in 0..k {
        for i in 0..n {
            idx.push(fr * cfg.hop + i);
            wsum[fr * cfg.hop + i] += win[i] * win[i];
        }
    }
    let ola = frames.scatter_add(idx.into(), &[total])?;
    let pad = cfg.pad();
    let mut keep: Vec<usize> = Vec::with_capacity(length);
    let mut inv = Vec::with_capacity(length);
    for t in pad..pad + length {
        if wsum[t] > 1e-10 {
            keep.push(t);
            inv.push(1.0 / wsum[t]);
        } else {
            keep.push(PAD_INDEX);
            inv.push(0.0);
        }
    }
    let keep: Rc<[usize]> = keep.into();
    ola.gather(keep, &[length])?.mul(&spec.tape().constant(Tensor::from_vec(inv)))
}

pub fn stft(clip: &AudioClip, cfg: StftConfig) -> Result<Spectrogram> {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(clip.samples().to_vec()));
    Spectrogram::from_cvar(&stft_var(&x, cfg)?, cfg, clip.sample_rate())
}

pub fn istft(spec: &Spectrogram, length: usize) -> Result<AudioClip> {
    let tape = Tape::new();
    let y = istft_var(&spec.to_cvar(&tape), spec.config(), length)?;
    AudioClip::new(y.value().into_data(), spec.sample_rate())
}
