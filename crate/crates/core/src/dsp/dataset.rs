//! Paired-directory datasets: `clean/`, `noisy/` and optional `noise/`
//! with matching file names, selected by a manifest of relative paths.

use std::fs;
use std::path::{Path, PathBuf};

use super::audio::{read_wav, resample, write_wav, AudioClip, WavFormat, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Reads a manifest: one relative path per line; blank lines and lines
/// starting with `#` are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

pub fn write_manifest(path: impl AsRef<Path>, names: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut text = names.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub name: String,
    pub clean: AudioClip,
    pub noisy: AudioClip,
    /// Exact additive noise if the dataset stores it; otherwise
    /// `noisy − clean`.
    pub noise: AudioClip,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub pairs: Vec<Pair>,
}

impl Dataset {
    /// Loads every manifest entry, resampling to 16 kHz. Fails listing all
    /// missing files if any pair is incomplete.
    pub fn load(root: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let names = read_manifest(manifest)?;
        if names.is_empty() {
            return Err(Error::Data("manifest lists no clips".into()));
        }
        let missing: Vec<String> = names
            .iter()
            .flat_map(|n| {
                ["clean", "noisy"]
                    .into_iter()
                    .map(move |d| (d, n))
                    .filter(|(d, n)| !root.join(d).join(n).is_file())
                    .map(|(d, n)| format!("{d}/{n}"))
                    .collect::<Vec<_>>()
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("missing pair files: {}", missing.join(", "))));
        }
        let mut pairs = Vec::with_capacity(names.len());
        for name in names {
            let clean = resample(&read_wav(root.join("clean").join(&name))?, SAMPLE_RATE)?;
            let noisy = resample(&read_wav(root.join("noisy").join(&name))?, SAMPLE_RATE)?;
            if clean.len() != noisy.len() {
                return Err(Error::Data(format!("{name}: clean has {} samples, noisy {}", clean.len(), noisy.len())));
            }
            let noise_path = root.join("noise").join(&name);
            let noise = if noise_path.is_file() {
                resample(&read_wav(noise_path)?, SAMPLE_RATE)?
            } else {
                let diff = noisy.samples().iter().zip(clean.samples()).map(|(y, x)| y - x).collect();
                AudioClip::new(diff, SAMPLE_RATE)?
            };
            pairs.push(Pair {
                name,
                clean,
                noisy,
                noise,
            });
        }
        Ok(Dataset { root, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Writes pairs under `root` with a `manifest.txt` listing them.
pub fn write_dataset(root: impl AsRef<Path>, pairs: &[Pair], format: WavFormat) -> Result<PathBuf> {
    let root = root.as_ref();
    for d in ["clean", "noisy", "noise"] {
        let dir = root.join(d);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for p in pairs {
        write_wav(root.join("clean").join(&p.name), &p.clean, format)?;
        write_wav(root.join("noisy").join(&p.name), &p.noisy, format)?;
        write_wav(root.join("noise").join(&p.name), &p.noise, format)?;
    }
    let manifest = root.join("manifest.txt");
    write_manifest(&manifest, &pairs.iter().map(|p| p.name.clone()).collect::<Vec<_>>())?;
    Ok(manifest)
}
