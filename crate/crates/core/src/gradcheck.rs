//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// `(input, coordinate)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, points: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarLoss(out.shape()));
    }
    Ok(out.item())
}

/// Compares reverse-mode gradients of the scalar function `f` at `points`
/// against central finite differences.
pub fn gradcheck<F>(f: F, points: &[Tensor]) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, points, &GradcheckOptions::default())
}

pub fn gradcheck_with<F>(f: F, points: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    for (i, p) in points.iter().enumerate() {
        if let Some(index) = p.first_non_finite() {
            return Err(Error::NonFinite {
                location: format!("gradcheck input {i}"),
                index,
            });
        }
    }
    let tape = Tape::new();
    let leaves: Vec<Var> = points.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&tape, &leaves)?;
    out.ensure_finite("gradcheck output")?;
    out.backward()?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(points)
        .map(|(l, p)| l.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    drop(leaves);
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
    };
    let mut work: Vec<Tensor> = points.to_vec();
    for (i, p) in points.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < p.len() => {
                let mut c = sample(&mut rng, p.len(), m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..p.len()).collect(),
        };
        for c in coords {
            let orig = p.data()[c];
            work[i].data_mut()[c] = orig + opts.step;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[c] = orig - opts.step;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[c] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("gradcheck input {i}"),
                    index: c,
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[i].data()[c];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, c));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
