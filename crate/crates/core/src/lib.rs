//! Dual-branch complex hybrid transformer for speech denoising: a
//! tape-based autodiff engine, complex-valued layers, a spectral Swin-Unet
//! branch, a temporal dual-path transformer branch, training and evaluation.

pub mod autodiff;
pub mod complex;
pub mod conv;
pub mod dptnet;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hybrid;
pub mod layers;
pub mod params;
pub mod suite;
pub mod swinunet;
pub mod tensor;

pub use autodiff::{Tape, Var};
pub use complex::CVar;
pub use dsp::{AudioClip, Dataset, MixSpec, NoiseKind, NoiseSource, Pair, Spectrogram, StftConfig, WavFormat};
pub use error::{Error, Result};
pub use eval::{si_sdr, sdr, EvalReport, EvalRow};
pub use hybrid::{Checkpoint, DchtModel, Fusion, ModelConfig};
pub use params::{Ctx, ParamStore};
pub use tensor::Tensor;
