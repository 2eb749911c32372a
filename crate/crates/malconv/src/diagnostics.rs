//! Pre-activation distribution diagnostics.
//!
//! Collects the raw conv responses (pre-gating, before any normalization)
//! over a corpus, standardizes them, and estimates their density with a
//! Gaussian KDE for comparison against a unit normal. A response
//! distribution far from Gaussian is the warning sign that batch
//! normalization will misbehave on this data.
//!
//! Everything here runs in f64 regardless of the model precision; the
//! moment checks are tighter than f32 can hold.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::model::{forward, pad_or_truncate, ModelConfig, ModelParams};
use crate::tensor::Scalar;

/// Which conv branch to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Linear,
    Gate,
}

pub const DEFAULT_SAMPLE_CAP: usize = 1_000_000;
/// Default evaluation grid: 512 points covering [-4, 4).
pub const DEFAULT_GRID_POINTS: usize = 512;

/// A kernel density estimate evaluated on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeCurve {
    pub x: Vec<f64>,
    pub pdf: Vec<f64>,
    pub bandwidth: f64,
    pub n_samples: usize,
}

/// 512 evenly spaced points from -4 with step 1/64. The step is dyadic, so
/// every point (including exactly 0 at index 256) is representable.
pub fn default_grid() -> Vec<f64> {
    (0..DEFAULT_GRID_POINTS)
        .map(|i| -4.0 + i as f64 * 0.015625)
        .collect()
}

/// Runs the forward pass over the first `n_files` manifest entries and
/// pools every pre-gating conv response of the chosen branch, reservoir-
/// sampled down to `sample_cap` with a fixed seed.
pub fn collect_preactivations<T: Scalar>(
    params: &ModelParams<T>,
    config: &ModelConfig,
    manifest: &Manifest,
    n_files: usize,
    sample_cap: usize,
    seed: u64,
    branch: Branch,
) -> Result<Vec<f64>> {
    if manifest.is_empty() {
        return Err(Error::Input("manifest is empty".into()));
    }
    if sample_cap == 0 {
        return Err(Error::Input("sample cap must be positive".into()));
    }
    let take = n_files.min(manifest.len());
    let per_file: Vec<Vec<f64>> = manifest.entries[..take]
        .par_iter()
        .map(|entry| -> Result<Vec<f64>> {
            let bytes = manifest.read_file(entry)?;
            let padded = pad_or_truncate(&bytes, config.max_len)?;
            let trace = forward(params, config, &padded.tokens)?;
            let source = match branch {
                Branch::Linear => &trace.pre_activation_linear,
                Branch::Gate => &trace.pre_activation_gate,
            };
            Ok(source.data().iter().map(|&v| v.to64()).collect())
        })
        .collect::<Result<_>>()?;

    // Reservoir sampling over the concatenated stream, folded in manifest
    // order so the result is deterministic for a fixed seed.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reservoir: Vec<f64> = Vec::with_capacity(sample_cap.min(65_536));
    let mut seen = 0usize;
    for chunk in per_file {
        for v in chunk {
            if reservoir.len() < sample_cap {
                reservoir.push(v);
            } else {
                let j = rng.random_range(0..=seen);
                if j < sample_cap {
                    reservoir[j] = v;
                }
            }
            seen += 1;
        }
    }
    Ok(reservoir)
}

fn moments(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Shifts and scales to mean 0 and unit population variance.
pub fn standardize(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(Error::Input(format!(
            "standardize needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    let (mean, var) = moments(samples);
    if var == 0.0 {
        return Err(Error::Input("zero variance, cannot standardize".into()));
    }
    let std = var.sqrt();
    Ok(samples.iter().map(|&v| (v - mean) / std).collect())
}

/// Silverman's rule of thumb: `1.06 * std * n^(-1/5)` (population std).
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Input("bandwidth needs at least 2 samples".into()));
    }
    let (_, var) = moments(samples);
    if var == 0.0 {
        return Err(Error::Input("zero variance, bandwidth undefined".into()));
    }
    Ok(1.06 * var.sqrt() * (samples.len() as f64).powf(-0.2))
}

pub fn standard_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Gaussian kernel density estimate on the given grid:
/// `pdf(x) = (1 / (n h)) * sum_i phi((x - s_i) / h)`.
pub fn kde(samples: &[f64], grid: &[f64], bandwidth: f64) -> Result<KdeCurve> {
    if samples.is_empty() {
        return Err(Error::Input("kde over empty samples".into()));
    }
    if !(bandwidth > 0.0) {
        return Err(Error::Input(format!("bandwidth {bandwidth} must be positive")));
    }
    let scale = 1.0 / (samples.len() as f64 * bandwidth);
    let pdf: Vec<f64> = grid
        .par_iter()
        .map(|&x| {
            let mut acc = 0.0f64;
            for &s in samples {
                acc += standard_normal_pdf((x - s) / bandwidth);
            }
            acc * scale
        })
        .collect();
    Ok(KdeCurve {
        x: grid.to_vec(),
        pdf,
        bandwidth,
        n_samples: samples.len(),
    })
}

/// The unit-Gaussian overlay evaluated on the same grid.
pub fn gaussian_reference(grid: &[f64]) -> KdeCurve {
    KdeCurve {
        x: grid.to_vec(),
        pdf: grid.iter().map(|&x| standard_normal_pdf(x)).collect(),
        bandwidth: 1.0,
        n_samples: 0,
    }
}

/// Trapezoidal integral of a curve over its grid.
pub fn trapezoid(curve: &KdeCurve) -> f64 {
    let mut acc = 0.0;
    for i in 1..curve.x.len() {
        acc += (curve.x[i] - curve.x[i - 1]) * (curve.pdf[i] + curve.pdf[i - 1]) * 0.5;
    }
    acc
}

/// Writes `x,pdf` rows, one per grid point.
pub fn emit_kde_csv(curve: &KdeCurve, path: &Path) -> Result<()> {
    fs::write(path, kde_to_csv(curve))
        .map_err(|e| Error::Environment(format!("writing {}: {e}", path.display())))
}

pub fn kde_to_csv(curve: &KdeCurve) -> String {
    let mut out = String::from("x,pdf\n");
    for (x, p) in curve.x.iter().zip(&curve.pdf) {
        out.push_str(&format!("{x},{p}\n"));
    }
    out
}
