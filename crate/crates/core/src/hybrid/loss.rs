//! Cross-domain training loss.
//!
//! Conventions: `clean` is the target `y`, `est` the estimate `ŷ`, `noisy`
//! the mixture and `noise = noisy − clean`.

use super::config::{AlphaMode, LossConfig};
use crate::autodiff::Var;
use crate::complex::CVar;
use crate::dsp::{stft_var, StftConfig};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// `mean(| |y_r| − |ŷ_r| | + | |y_i| − |ŷ_i| |)` over all bins.
pub fn loss_tf(clean: &CVar, est: &CVar) -> Result<Var> {
    same_shape("loss_tf", &clean.shape(), &est.shape())?;
    let re = clean.re.abs().sub(&est.re.abs())?.abs();
    let im = clean.im.abs().sub(&est.im.abs())?.abs();
    Ok(re.add(&im)?.mean())
}

/// `(‖y − ŷ‖₁ + ‖n − n̂‖₁) / L` with `n̂ = noisy − ŷ`.
pub fn loss_t(clean: &Var, est: &Var, noisy: &Var) -> Result<Var> {
    same_shape("loss_t", &clean.shape(), &est.shape())?;
    same_shape("loss_t", &clean.shape(), &noisy.shape())?;
    let speech = clean.sub(est)?.abs().sum();
    let noise = noisy.sub(clean)?.sub(&noisy.sub(est)?)?.abs().sum();
    Ok(speech.add(&noise)?.scale(1.0 / clean.numel() as f64))
}

/// `α·tf + (1 − α)·t`.
pub fn loss_total(alpha: f64, tf: &Var, t: &Var) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha {alpha} not in [0, 1]")));
    }
    tf.scale(alpha).add(&t.scale(1.0 - alpha))
}

/// Mean squared magnitude of the spectrum over mean squared waveform plus
/// itself; used by [`AlphaMode::Energy`].
pub fn energy_alpha(clean: &Var, clean_spec: &CVar) -> f64 {
    let e_spec = clean_spec.abs_sq().with_value(|v| v.iter().sum::<f64>() / v.len().max(1) as f64);
    let e_time = clean.with_value(|v| v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64);
    if e_spec + e_time > 0.0 {
        e_spec / (e_spec + e_time)
    } else {
        0.5
    }
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub tf: Var,
    pub t: Var,
    pub alpha: f64,
    pub total: Var,
}

/// The training loss of an estimate: the frequency term compares the STFTs
/// of `clean` and `est`, the time term the waveforms.
pub fn cross_domain_loss(clean: &Var, est: &Var, noisy: &Var, stft: StftConfig, cfg: &LossConfig) -> Result<LossParts> {
    let clean_spec = stft_var(clean, stft)?;
    let est_spec = stft_var(est, stft)?;
    let alpha = match cfg.alpha_mode {
        AlphaMode::Fixed => cfg.alpha,
        AlphaMode::Energy => energy_alpha(clean, &clean_spec),
    };
    let tf = loss_tf(&clean_spec, &est_spec)?;
    let t = loss_t(clean, est, noisy)?;
    let total = loss_total(alpha, &tf, &t)?;
    Ok(LossParts { tf, t, alpha, total })
}
