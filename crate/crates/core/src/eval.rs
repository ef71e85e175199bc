//! Signal-to-distortion metrics and dataset evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::dsp::{Dataset, Pair};
use crate::error::{Error, Result};
use crate::hybrid::{Checkpoint, DchtModel, Fusion};
use crate::params::ParamStore;

/// Ratios are clamped to `±SDR_CAP_DB`.
pub const SDR_CAP_DB: f64 = 100.0;

/// A residual below this fraction of the reference energy counts as zero.
const RESIDUAL_FLOOR: f64 = 1e-20;

pub const CSV_HEADER: &str = "name,input_sdr_db,output_sdr_db,delta_sdr_db,duration_s";

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn check(clean: &[f64], est: &[f64]) -> Result<f64> {
    if clean.len() != est.len() {
        return Err(Error::Audio(format!("length mismatch: reference {} samples, estimate {}", clean.len(), est.len())));
    }
    let e = energy(clean);
    if e == 0.0 {
        return Err(Error::Audio("reference signal is silent".into()));
    }
    Ok(e)
}

fn ratio_db(signal: f64, residual: f64) -> f64 {
    if residual < RESIDUAL_FLOOR * signal {
        return SDR_CAP_DB;
    }
    (10.0 * (signal / residual).log10()).clamp(-SDR_CAP_DB, SDR_CAP_DB)
}

/// `10·log10(‖clean‖² / ‖clean − est‖²)` in dB.
pub fn sdr(clean: &[f64], est: &[f64]) -> Result<f64> {
    let signal = check(clean, est)?;
    let residual: f64 = clean.iter().zip(est).map(|(c, e)| (c - e) * (c - e)).sum();
    Ok(ratio_db(signal, residual))
}

/// Scale-invariant SDR: the reference is first scaled by the least-squares
/// gain `⟨est, clean⟩ / ‖clean‖²`.
pub fn si_sdr(clean: &[f64], est: &[f64]) -> Result<f64> {
    let e = check(clean, est)?;
    let gain = clean.iter().zip(est).map(|(c, x)| c * x).sum::<f64>() / e;
    let target = gain * gain * e;
    let residual: f64 = clean.iter().zip(est).map(|(c, x)| (x - gain * c).powi(2)).sum();
    if target == 0.0 {
        return Ok(-SDR_CAP_DB);
    }
    Ok(ratio_db(target, residual))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub name: String,
    #[serde(rename = "input_sdr_db")]
    pub input_sdr: f64,
    #[serde(rename = "output_sdr_db")]
    pub output_sdr: f64,
    #[serde(rename = "delta_sdr_db")]
    pub delta_sdr: f64,
    #[serde(rename = "duration_s")]
    pub duration: f64,
}

impl EvalRow {
    pub fn new(pair: &Pair, enhanced: &[f64]) -> Result<Self> {
        let clean = pair.clean.samples();
        let input_sdr = sdr(clean, pair.noisy.samples()).map_err(|e| name_err(&pair.name, e))?;
        let output_sdr = sdr(clean, enhanced).map_err(|e| name_err(&pair.name, e))?;
        Ok(EvalRow {
            name: pair.name.clone(),
            input_sdr,
            output_sdr,
            delta_sdr: output_sdr - input_sdr,
            duration: pair.clean.duration_secs(),
        })
    }
}

fn name_err(name: &str, e: Error) -> Error {
    Error::Data(format!("{name}: {e}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_input_sdr: f64,
    pub mean_output_sdr: f64,
    pub mean_delta_sdr: f64,
    pub config_hash: String,
    pub checkpoint_id: String,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, config_hash: String, checkpoint_id: String) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("no clips evaluated".into()));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            mean_input_sdr: mean(|r| r.input_sdr),
            mean_output_sdr: mean(|r| r.output_sdr),
            mean_delta_sdr: mean(|r| r.delta_sdr),
            rows,
            config_hash,
            checkpoint_id,
        })
    }

    /// Per-clip rows under [`CSV_HEADER`].
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Data(format!("csv: {e}")))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Data(format!("csv: {e}")))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Human-readable table with the aggregate line and provenance ids.
    pub fn table(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>9}  {:>9}  {:>8}", "clip", "in SDR", "out SDR", "ΔSDR", "dur s");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>9.3}  {:>9.3}  {:>+9.3}  {:>8.3}",
                r.name, r.input_sdr, r.output_sdr, r.delta_sdr, r.duration
            );
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.3}  {:>9.3}  {:>+9.3}",
            "mean", self.mean_input_sdr, self.mean_output_sdr, self.mean_delta_sdr
        );
        let _ = writeln!(s, "clips {}  config {}  checkpoint {}", self.rows.len(), self.config_hash, self.checkpoint_id);
        s
    }
}

/// Enhances every pair in order and scores it.
pub fn evaluate(
    model: &DchtModel,
    store: &ParamStore,
    pairs: &[Pair],
    fusion: Fusion,
    config_hash: String,
    checkpoint_id: String,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no clips to evaluate".into()));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for p in pairs {
        let out = model.enhance(store, &p.noisy, fusion)?;
        rows.push(EvalRow::new(p, out.samples())?);
    }
    EvalReport::from_rows(rows, config_hash, checkpoint_id)
}

/// Loads the dataset named by `manifest` under `root` and evaluates the
/// checkpoint on it in manifest order.
pub fn evaluate_checkpoint(
    checkpoint: Checkpoint,
    root: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
    fusion: Option<Fusion>,
) -> Result<EvalReport> {
    let id = checkpoint.id()?;
    let hash = checkpoint.config.hash()?;
    let data = Dataset::load(root, manifest)?;
    let (model, store) = checkpoint.into_model()?;
    let fusion = fusion.unwrap_or(model.config.fusion);
    evaluate(&model, &store, &data.pairs, fusion, hash, id)
}
