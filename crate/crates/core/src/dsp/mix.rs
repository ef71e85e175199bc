//! SNR-controlled mixtures and the synthetic signals used in place of a
//! speech corpus.

use std::f64::consts::PI;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::audio::{power, read_wav, resample, AudioClip};
use crate::error::{Error, Result};

/// Grid that mixture noise is rounded to. With clean samples on the same
/// grid (PCM sources and [`synthetic_speech`]), `noisy − noise` reproduces
/// `clean` exactly.
pub const MIX_GRID: f64 = 1.0 / (1u64 << 40) as f64;

/// Grid of synthetic clean speech (24-bit audio resolution).
const SPEECH_GRID: f64 = 1.0 / (1u64 << 23) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    White,
    Pink,
    /// Several overlapping synthetic talkers.
    Babble,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "white" => Ok(NoiseKind::White),
            "pink" => Ok(NoiseKind::Pink),
            "babble" => Ok(NoiseKind::Babble),
            other => Err(Error::InvalidArgument(format!("unknown noise kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NoiseSource {
    Synthetic(NoiseKind),
    /// Looped from a random offset and resampled to the clean rate.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    /// Target SNR in dB; `f64::INFINITY` means no noise.
    pub snr_db: f64,
    pub noise: NoiseSource,
    pub seed: u64,
}

/// `10·log10(P_clean / P_noise)`.
pub fn snr_db(clean: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power(clean) / power(noise)).log10()
}

pub fn noise(kind: NoiseKind, len: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        NoiseKind::White => (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        NoiseKind::Pink => {
            // Paul Kellet's refined pink filter.
            let mut b = [0.0f64; 7];
            (0..len)
                .map(|_| {
                    let w: f64 = rng.sample(StandardNormal);
                    b[0] = 0.99886 * b[0] + w * 0.0555179;
                    b[1] = 0.99332 * b[1] + w * 0.0750759;
                    b[2] = 0.96900 * b[2] + w * 0.1538520;
                    b[3] = 0.86650 * b[3] + w * 0.3104856;
                    b[4] = 0.55000 * b[4] + w * 0.5329522;
                    b[5] = -0.7616 * b[5] - w * 0.0168980;
                    let out = b.iter().sum::<f64>() + w * 0.5362;
                    b[6] = w * 0.115926;
                    out
                })
                .collect()
        }
        NoiseKind::Babble => {
            let mut out = vec![0.0; len];
            for talker in 0..6u64 {
                let s = synthetic_speech(len, sample_rate, seed.wrapping_mul(31).wrapping_add(talker + 1));
                out.iter_mut().zip(s.samples()).for_each(|(o, v)| *o += v);
            }
            out
        }
    }
}

/// A speech-like test signal: a harmonic source with a drifting pitch,
/// shaped by moving formant resonances and a syllabic on/off envelope.
pub fn synthetic_speech(len: usize, sample_rate: u32, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = sample_rate as f64;
    let f0_base = rng.gen_range(95.0..230.0);
    let vibrato_rate = rng.gen_range(3.0..6.0);
    let syllable_rate = rng.gen_range(3.0..5.0);
    let syllable_phase = rng.gen_range(0.0..2.0 * PI);
    // Formant targets for a few vowels, switched every syllable.
    let vowels = [[730.0, 1090.0, 2440.0], [270.0, 2290.0, 3010.0], [530.0, 1840.0, 2480.0], [300.0, 870.0, 2240.0], [640.0, 1190.0, 2390.0]];
    let syllable_len = (fs / syllable_rate) as usize;
    let order: Vec<usize> = (0..len / syllable_len.max(1) + 2).map(|_| rng.gen_range(0..vowels.len())).collect();
    let max_harm = ((0.45 * fs) / f0_base).floor() as usize;
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / fs;
        let f0 = f0_base * (1.0 + 0.04 * (2.0 * PI * vibrato_rate * t).sin() + 0.08 * (2.0 * PI * 0.5 * t).sin());
        phase += 2.0 * PI * f0 / fs;
        let syl = n / syllable_len.max(1);
        let pos = (n % syllable_len.max(1)) as f64 / syllable_len.max(1) as f64;
        let (a, b) = (vowels[order[syl]], vowels[order[syl + 1]]);
        let formants: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + (y - x) * pos * pos).collect();
        let mut v = 0.0;
        for h in 1..=max_harm {
            let fh = h as f64 * f0;
            if fh > 0.45 * fs {
                break;
            }
            let gain: f64 = formants.iter().map(|fc| 1.0 / (1.0 + ((fh - fc) / 90.0).powi(2))).sum();
            v += gain / (h as f64).sqrt() * (h as f64 * phase).sin();
        }
        let env = (0.5 - 0.5 * (2.0 * PI * syllable_rate * t + syllable_phase).cos()).powf(1.5);
        out.push(v * env);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let samples = out.into_iter().map(|v| (v / peak * 0.5 / SPEECH_GRID).round() * SPEECH_GRID).collect();
    AudioClip::new(samples, sample_rate).expect("finite by construction")
}

fn noise_for(spec: &MixSpec, len: usize, sample_rate: u32) -> Result<Vec<f64>> {
    match &spec.noise {
        NoiseSource::Synthetic(kind) => Ok(noise(*kind, len, sample_rate, spec.seed)),
        NoiseSource::File(path) => {
            let n = resample(&read_wav(path)?, sample_rate)?;
            if n.power() == 0.0 {
                return Err(Error::Audio(format!("{}: noise file is silent", path.display())));
            }
            let src = n.samples();
            let start = ChaCha8Rng::seed_from_u64(spec.seed).gen_range(0..src.len());
            Ok((0..len).map(|i| src[(start + i) % src.len()]).collect())
        }
    }
}

/// Adds noise scaled to the requested SNR. Returns `(noisy, noise)` with
/// `noisy = clean + noise`.
pub fn mix(clean: &AudioClip, spec: &MixSpec) -> Result<(AudioClip, AudioClip)> {
    let p_clean = clean.power();
    if p_clean == 0.0 {
        return Err(Error::Audio("clean clip is silent".into()));
    }
    let rate = clean.sample_rate();
    if spec.snr_db == f64::INFINITY {
        return Ok((clean.clone(), AudioClip::new(vec![0.0; clean.len()], rate)?));
    }
    if !spec.snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr {} dB", spec.snr_db)));
    }
    let raw = noise_for(spec, clean.len(), rate)?;
    let p_noise = power(&raw);
    if p_noise == 0.0 {
        return Err(Error::Audio("noise is silent".into()));
    }
    let gain = (p_clean / (p_noise * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = raw.iter().map(|v| (v * gain / MIX_GRID).round() * MIX_GRID).collect();
    let noisy = clean.samples().iter().zip(&scaled).map(|(c, n)| c + n).collect();
    Ok((AudioClip::new(noisy, rate)?, AudioClip::new(scaled, rate)?))
}
