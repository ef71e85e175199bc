//! Inputs shared by the benchmarks.

use dcht_core::dsp::{mix, synthetic_speech, MixSpec, NoiseKind, NoiseSource, Pair};

/// A one-second synthetic pair at 5 dB white-noise SNR.
pub fn one_second_pair(seed: u64) -> Pair {
    let clean = synthetic_speech(16000, 16000, seed);
    let spec = MixSpec {
        snr_db: 5.0,
        noise: NoiseSource::Synthetic(NoiseKind::White),
        seed: seed + 100,
    };
    let (noisy, noise) = mix(&clean, &spec).expect("synthetic speech is not silent");
    Pair {
        name: format!("bench{seed}"),
        clean,
        noisy,
        noise,
    }
}
