//! The two-branch model: spectral estimate resynthesized by ISTFT plus the
//! temporal estimate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Fusion, ModelConfig};
use crate::autodiff::Var;
use crate::complex::CVar;
use crate::dptnet::DptNet;
use crate::dsp::{istft_var, stft_var, AudioClip};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::swinunet::SwinUnet;
use crate::tensor::Tensor;

pub const SPECTRAL_NAMESPACE: &str = "swinunet";
pub const TEMPORAL_NAMESPACE: &str = "dptnet";

#[derive(Debug, Clone)]
pub struct DchtModel {
    pub config: ModelConfig,
    pub spectral: SwinUnet,
    pub temporal: DptNet,
}

/// Everything one forward pass produces on the tape.
#[derive(Debug, Clone)]
pub struct DchtOutput {
    pub enhanced: Var,
    /// Spectral branch waveform, when that branch ran.
    pub spectral: Option<Var>,
    /// Spectral branch estimate `[K, F]`.
    pub spectral_spec: Option<CVar>,
    pub temporal: Option<Var>,
}

impl DchtModel {
    /// Builds the model and its freshly initialized parameters, seeded from
    /// `config.train.seed`.
    pub fn new(config: ModelConfig) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let spectral = SwinUnet::new(&mut store, SPECTRAL_NAMESPACE, config.swinunet.clone(), &mut rng)?;
        let temporal = DptNet::new(&mut store, TEMPORAL_NAMESPACE, config.dptnet.clone(), &mut rng)?;
        Ok((
            DchtModel {
                config,
                spectral,
                temporal,
            },
            store,
        ))
    }

    /// Rebuilds the layer structure for `config` without keeping the new
    /// parameter values (used when loading a checkpoint).
    pub fn structure(config: ModelConfig) -> Result<Self> {
        Ok(Self::new(config)?.0)
    }

    pub fn fusion(&self) -> Fusion {
        self.config.fusion
    }

    /// The spectral branch alone: STFT, Swin-Unet, ISTFT back to `[L]`.
    pub fn spectral_forward(&self, ctx: &Ctx, noisy: &Var) -> Result<(Var, CVar)> {
        let run = || -> Result<(Var, CVar)> {
            let len = noisy.numel();
            let spec = stft_var(noisy, self.config.stft)?;
            let out = self.spectral.forward(ctx, &spec)?;
            let wave = istft_var(&out.estimate, self.config.stft, len)?;
            Ok((wave, out.estimate))
        };
        run().map_err(|e| e.in_branch("spectral"))
    }

    pub fn temporal_forward(&self, ctx: &Ctx, noisy: &Var) -> Result<Var> {
        self.temporal.forward(ctx, noisy).map_err(|e| e.in_branch("temporal"))
    }

    /// `noisy: [L] -> [L]` under `fusion`.
    pub fn forward_with(&self, ctx: &Ctx, noisy: &Var, fusion: Fusion) -> Result<DchtOutput> {
        if noisy.shape().len() != 1 {
            return Err(Error::InvalidShape {
                op: "dcht",
                detail: format!("expected a 1-D clip, got {:?}", noisy.shape()),
            });
        }
        let (spectral, spectral_spec) = if fusion.uses_spectral() {
            let (w, s) = self.spectral_forward(ctx, noisy)?;
            (Some(w), Some(s))
        } else {
            (None, None)
        };
        let temporal = if fusion.uses_temporal() {
            Some(self.temporal_forward(ctx, noisy)?)
        } else {
            None
        };
        let enhanced = match (&spectral, &temporal) {
            (Some(s), Some(t)) => s.add(t)?,
            (Some(s), None) => s.clone(),
            (None, Some(t)) => t.clone(),
            (None, None) => noisy.clone(),
        };
        Ok(DchtOutput {
            enhanced,
            spectral,
            spectral_spec,
            temporal,
        })
    }

    pub fn forward(&self, ctx: &Ctx, noisy: &Var) -> Result<DchtOutput> {
        self.forward_with(ctx, noisy, self.config.fusion)
    }

    /// Inference on a clip with frozen parameters.
    pub fn enhance(&self, store: &ParamStore, noisy: &AudioClip, fusion: Fusion) -> Result<AudioClip> {
        let ctx = Ctx::eval(store);
        let x = ctx.input(Tensor::from_vec(noisy.samples().to_vec()));
        let out = self.forward_with(&ctx, &x, fusion)?;
        AudioClip::new(out.enhanced.value().into_data(), noisy.sample_rate())
    }
}
