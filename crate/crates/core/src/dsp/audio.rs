//! Mono waveforms, WAV files and sample-rate conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Canonical sample rate of every model in this crate.
pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                location: "audio clip".into(),
                index: i,
            });
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square.
    pub fn power(&self) -> f64 {
        power(&self.samples)
    }
}

pub(crate) fn power(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }
}

/// Sample encoding used when writing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

/// Reads a PCM16, PCM24/32 or float32 RIFF file; multi-channel input is
/// averaged down to mono.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Int, bits @ (16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
        (fmt, bits) => {
            return Err(Error::Audio(format!(
                "{}: unsupported codec {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect()
    };
    AudioClip::new(samples, spec.sample_rate)
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio(format!("{}: {other}", path.display())),
    }
}

/// Writes a mono file. PCM16 clips samples to [-1, 1).
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, hound::SampleFormat::Int),
        WavFormat::Float32 => (32, hound::SampleFormat::Float),
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        let r = match format {
            WavFormat::Pcm16 => writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16),
            WavFormat::Float32 => writer.write_sample(s as f32),
        };
        r.map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

const RESAMPLE_TAPS: usize = 64;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Windowed-sinc polyphase resampler with a 64-tap Blackman-windowed kernel
/// per output phase. Output length is `ceil(len · target / source)`.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::Audio("target sample rate must be positive".into()));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let g = gcd(target_rate as u64, clip.sample_rate as u64);
    let up = target_rate as u64 / g;
    let down = clip.sample_rate as u64 / g;
    // Cutoff relative to the input Nyquist; lowered when decimating.
    let cutoff = (up as f64 / down as f64).min(1.0) * 0.95;
    let half = (RESAMPLE_TAPS / 2) as i64;
    let window = |d: f64| {
        let x = d / half as f64;
        if x.abs() >= 1.0 {
            0.0
        } else {
            let a = std::f64::consts::PI * x;
            0.42 + 0.5 * a.cos() + 0.08 * (2.0 * a).cos()
        }
    };
    let phases: Vec<Vec<f64>> = (0..up)
        .map(|p| {
            let frac = p as f64 / up as f64;
            let mut taps: Vec<f64> = (-half + 1..=half)
                .map(|k| {
                    let d = k as f64 - frac;
                    cutoff * sinc(cutoff * d) * window(d)
                })
                .collect();
            let s: f64 = taps.iter().sum();
            taps.iter_mut().for_each(|t| *t /= s);
            taps
        })
        .collect();
    let x = &clip.samples;
    let out_len = (x.len() as u64 * up).div_ceil(down) as usize;
    let mut out = Vec::with_capacity(out_len);
    for n in 0..out_len as u64 {
        let pos = n * down;
        let base = (pos / up) as i64;
        let taps = &phases[(pos % up) as usize];
        let mut acc = 0.0;
        for (t, k) in taps.iter().zip(-half + 1..=half) {
            let i = base + k;
            if i >= 0 && (i as usize) < x.len() {
                acc += t * x[i as usize];
            }
        }
        out.push(acc);
    }
    AudioClip::new(out, target_rate)
}

/// Zero-pads clips to a common length: `([batch, max_len], true lengths)`.
pub fn pad_batch(clips: &[AudioClip]) -> Result<(Tensor, Vec<usize>)> {
    let max = clips.iter().map(AudioClip::len).max().unwrap_or(0);
    if max == 0 {
        return Err(Error::Audio("cannot batch an empty set of clips".into()));
    }
    let mut data = vec![0.0; clips.len() * max];
    for (row, c) in data.chunks_mut(max).zip(clips) {
        row[..c.len()].copy_from_slice(c.samples());
    }
    let lengths = clips.iter().map(AudioClip::len).collect();
    Ok((Tensor::new([clips.len(), max], data)?, lengths))
}
