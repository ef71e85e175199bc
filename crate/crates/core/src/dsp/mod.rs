//! Audio signal processing: WAV I/O, resampling, STFT/ISTFT, mixtures and
//! datasets.

mod audio;
mod dataset;
mod mix;
mod stft;

pub use audio::{pad_batch, read_wav, resample, write_wav, AudioClip, WavFormat, SAMPLE_RATE};
pub use dataset::{read_manifest, write_dataset, write_manifest, Dataset, Pair};
pub use mix::{mix, noise, snr_db, synthetic_speech, MixSpec, NoiseKind, NoiseSource, MIX_GRID};
pub use stft::{hann, istft, istft_var, stft, stft_var, Spectrogram, StftConfig};
