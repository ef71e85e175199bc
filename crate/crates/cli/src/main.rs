//! `dcht`: build mixtures, train, denoise, evaluate and run gradient checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dcht_core::dsp::{mix, read_wav, resample, snr_db, synthetic_speech, write_dataset, write_wav, SAMPLE_RATE};
use dcht_core::eval::evaluate_checkpoint;
use dcht_core::hybrid::{split_validation, train};
use dcht_core::suite::{gradient_suite, TOLERANCE};
use dcht_core::{Checkpoint, Dataset, DchtModel, Error, Fusion, MixSpec, ModelConfig, NoiseKind, NoiseSource, Pair, WavFormat};

#[derive(Parser, Debug)]
#[command(name = "dcht", version, about = "Dual-branch complex hybrid transformer speech denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a paired clean/noisy dataset at a fixed SNR.
    Mix(MixArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Enhance one WAV file.
    Denoise(DenoiseArgs),
    /// Score a checkpoint on a dataset (SDR per clip).
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print the default configuration as TOML.
    Config,
}

#[derive(clap::Args, Debug)]
struct MixArgs {
    /// Output dataset directory (clean/, noisy/, noise/, manifest.txt).
    #[arg(long)]
    out: PathBuf,
    /// Directory of clean WAV files; resampled to 16 kHz.
    #[arg(long, conflicts_with = "synthetic")]
    clean_dir: Option<PathBuf>,
    /// Generate this many synthetic speech-like clean clips instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Length of synthetic clips in samples.
    #[arg(long, default_value_t = 16000)]
    length: usize,
    /// Target SNR in dB.
    #[arg(long)]
    snr: f64,
    /// white, pink, babble, or a path to a noise WAV file.
    #[arg(long, default_value = "white")]
    noise: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write 16-bit PCM instead of 32-bit float.
    #[arg(long)]
    pcm16: bool,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// TOML configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Manifest file (default: <data>/manifest.txt).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Where to write the best-validation checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Also write the final-step checkpoint here.
    #[arg(long)]
    last: Option<PathBuf>,
    /// Override train.max_steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Override train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Print every n-th step.
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Branch {
    Spectral,
    Temporal,
    Both,
}

impl From<Branch> for Fusion {
    fn from(b: Branch) -> Fusion {
        match b {
            Branch::Spectral => Fusion::Spectral,
            Branch::Temporal => Fusion::Temporal,
            Branch::Both => Fusion::Both,
        }
    }
}

#[derive(clap::Args, Debug)]
struct DenoiseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Which branch output to use (default: the checkpoint's fusion mode).
    #[arg(long, value_enum)]
    branch: Option<Branch>,
    #[arg(long)]
    pcm16: bool,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the per-clip CSV report here.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long, value_enum)]
    branch: Option<Branch>,
}

#[derive(clap::Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Raised when gradient checks exceed the tolerance.
#[derive(Debug)]
struct GradcheckFailed(usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) above tolerance {TOLERANCE:e}", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn core_code(e: &Error) -> u8 {
    match e {
        Error::Branch { source, .. } => core_code(source),
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::Audio(_) | Error::Data(_) | Error::Checkpoint(_) | Error::Io { .. } => 2,
        _ => 3,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<GradcheckFailed>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_code(e);
        }
    }
    2
}

fn manifest_path(data: &Path, manifest: Option<PathBuf>) -> PathBuf {
    manifest.unwrap_or_else(|| data.join("manifest.txt"))
}

fn noise_source(spec: &str) -> Result<NoiseSource> {
    match spec.parse::<NoiseKind>() {
        Ok(kind) => Ok(NoiseSource::Synthetic(kind)),
        Err(_) if Path::new(spec).is_file() => Ok(NoiseSource::File(spec.into())),
        Err(_) => Err(Error::InvalidArgument(format!("--noise {spec:?} is neither a noise kind nor a file")).into()),
    }
}

fn run_mix(a: MixArgs) -> Result<()> {
    let source = noise_source(&a.noise)?;
    let cleans: Vec<(String, dcht_core::AudioClip)> = match (&a.clean_dir, a.synthetic) {
        (Some(dir), None) => {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)
                .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Data(format!("no .wav files in {}", dir.display())).into());
            }
            let mut out = Vec::new();
            for f in files {
                let clip = resample(&read_wav(&f)?, SAMPLE_RATE)?;
                let name = f.file_name().expect("listed file").to_string_lossy().into_owned();
                out.push((name, clip));
            }
            out
        }
        (None, Some(n)) if n > 0 => (0..n)
            .map(|i| (format!("synth_{i:04}.wav"), synthetic_speech(a.length, SAMPLE_RATE, a.seed.wrapping_add(i as u64))))
            .collect(),
        _ => bail!(Error::InvalidArgument("give either --clean-dir or --synthetic N (N > 0)".into())),
    };
    let mut pairs = Vec::with_capacity(cleans.len());
    let mut worst = 0.0f64;
    for (i, (name, clean)) in cleans.into_iter().enumerate() {
        let spec = MixSpec {
            snr_db: a.snr,
            noise: source.clone(),
            seed: a.seed.wrapping_add(1_000_003 * (i as u64 + 1)),
        };
        let (noisy, noise) = mix(&clean, &spec).with_context(|| format!("mixing {name}"))?;
        if a.snr.is_finite() {
            worst = worst.max((snr_db(clean.samples(), noise.samples()) - a.snr).abs());
        }
        pairs.push(Pair { name, clean, noisy, noise });
    }
    let format = if a.pcm16 { WavFormat::Pcm16 } else { WavFormat::Float32 };
    let manifest = write_dataset(&a.out, &pairs, format)?;
    println!("wrote {} pairs at {} dB SNR (max deviation {worst:.2e} dB) to {}", pairs.len(), a.snr, manifest.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(s) = a.steps {
        config.train.max_steps = Some(s);
    }
    if let Some(e) = a.epochs {
        config.train.epochs = e;
    }
    if let Some(s) = a.seed {
        config.train.seed = s;
    }
    config.validate()?;
    let data = Dataset::load(&a.data, manifest_path(&a.data, a.manifest))?;
    let (train_set, val_set) = split_validation(&data.pairs, config.train.validation_fraction, config.train.seed);
    let (model, store) = DchtModel::new(config.clone())?;
    println!(
        "training on {} clips ({} held out), {} parameters, config {}",
        train_set.len(),
        val_set.len(),
        store.numel(),
        &config.hash()?[..12]
    );
    let start = Instant::now();
    let every = a.log_every.max(1);
    let outcome = train(&model, store, &train_set, &val_set, |s| {
        if s.step % every == 0 || s.step == 1 {
            println!(
                "step {:>6}  epoch {:>4}  loss {:.5}  tf {:.5}  t {:.5}  lr {:.3e}  |g| {:.3}  {:.1}s",
                s.step,
                s.epoch,
                s.loss,
                s.loss_tf,
                s.loss_t,
                s.lr,
                s.grad_norm,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    for e in &outcome.epochs {
        println!("epoch {:>4}  train {:.5}  validation {:.5}", e.epoch, e.train_loss, e.val_loss);
    }
    let steps = outcome.state.step as u64;
    let best = Checkpoint::new(config.clone(), outcome.best, steps);
    best.save(&a.out)?;
    println!("best validation loss {:.5}; checkpoint {} ({})", outcome.best_val, a.out.display(), &best.id()?[..12]);
    if let Some(last) = &a.last {
        Checkpoint::new(config, outcome.last, steps).save(last)?;
        println!("final checkpoint {}", last.display());
    }
    Ok(())
}

fn run_denoise(a: DenoiseArgs) -> Result<()> {
    let (model, store) = Checkpoint::load(&a.checkpoint)?.into_model()?;
    let clip = resample(&read_wav(&a.input)?, SAMPLE_RATE)?;
    let fusion = a.branch.map(Fusion::from).unwrap_or(model.config.fusion);
    let out = model.enhance(&store, &clip, fusion)?;
    let format = if a.pcm16 { WavFormat::Pcm16 } else { WavFormat::Float32 };
    write_wav(&a.output, &out, format)?;
    println!("{} -> {} ({} samples, {fusion:?})", a.input.display(), a.output.display(), out.len());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = manifest_path(&a.data, a.manifest);
    let report = evaluate_checkpoint(ck, &a.data, &manifest, a.branch.map(Fusion::from))?;
    print!("{}", report.table());
    if let Some(p) = &a.csv {
        report.write_csv(p)?;
    }
    println!("mean ΔSDR {:+.3} dB", report.mean_delta_sdr);
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let start = Instant::now();
    let entries = gradient_suite(a.seed)?;
    let mut failed = 0;
    for e in &entries {
        let verdict = if e.passed() { "ok  " } else { "FAIL" };
        println!("{verdict} {:<36} max rel err {:.2e} over {} coords", e.name, e.report.max_rel_error, e.report.coords_checked);
        failed += usize::from(!e.passed());
    }
    println!("{} checks in {:.1}s", entries.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(GradcheckFailed(failed).into());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Mix(a) => run_mix(a),
        Command::Train(a) => run_train(a),
        Command::Denoise(a) => run_denoise(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Config => {
            print!("{}", ModelConfig::default().to_toml()?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
