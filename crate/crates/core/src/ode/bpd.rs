//! Bits per dimension of quantized data.
//!
//! A pixel vector `x ∈ {0..255}^d` is dequantized as `x + u`, `u ~ U(0,1)^d`,
//! and mapped to model space by `y = (x + u)/2⁷ − 1`. With `K` draws,
//!
//! ```text
//! BPD = −[logsumexp_k log p(y_k) − log K] / (d log 2) + 7
//! ```
//!
//! where the `+7` accounts for the Jacobian of the pixel transform.

use rand::Rng;
use rand_pcg::Pcg64;
use rayon::prelude::*;

use super::{log_likelihood, BatchField, LikelihoodCfg, OdeError};
use crate::data::{from_pixel_space, QuantizedMixture};
use crate::oracle::log_sum_exp;
use crate::rng::{indexed_substream, STREAM_DEQUANT, STREAM_PROBES};

/// A density on model space `[−1, 1]^d` (or beyond).
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    /// `log p(y)`; `rng` feeds any internal randomness (e.g. trace probes).
    fn log_density(&self, y: &[f64], rng: &mut Pcg64) -> Result<f64, OdeError>;
}

/// Uniform density on `[−1, 1]^d`.
#[derive(Debug, Clone, Copy)]
pub struct UniformCube {
    pub dim: usize,
}

impl LogDensity for UniformCube {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, y: &[f64], _: &mut Pcg64) -> Result<f64, OdeError> {
        if y.iter().all(|v| (-1.0..=1.0).contains(v)) {
            Ok(-(self.dim as f64) * std::f64::consts::LN_2)
        } else {
            Ok(f64::NEG_INFINITY)
        }
    }
}

/// The generating mixture of the quantized dataset, as a model-space density.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    pub mixture: QuantizedMixture,
    pub dim: usize,
}

impl LogDensity for MixtureDensity {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&self, y: &[f64], _: &mut Pcg64) -> Result<f64, OdeError> {
        Ok(self.mixture.log_density(y))
    }
}

/// Density of a continuous normalizing flow.
pub struct CnfDensity<F> {
    pub field: F,
    pub cfg: LikelihoodCfg,
}

impl<F: BatchField> LogDensity for CnfDensity<F> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn log_density(&self, y: &[f64], rng: &mut Pcg64) -> Result<f64, OdeError> {
        Ok(log_likelihood(&self.field, y, &self.cfg, rng)?.logp)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BpdReport {
    pub per_example: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean.
    pub stderr: f64,
}

/// Importance-weighted BPD with `k` dequantization draws per example.
/// Example `i` uses substreams `dequant/i` and `probes/i` of `seed`, so the
/// first draws coincide across different `k`.
pub fn bpd<D: LogDensity + ?Sized>(
    density: &D,
    pixels: &[Vec<i64>],
    k: usize,
    seed: u64,
) -> Result<BpdReport, OdeError> {
    if k == 0 {
        return Err(OdeError::Config("K must be at least 1".into()));
    }
    if pixels.is_empty() {
        return Err(OdeError::Config("no examples".into()));
    }
    let d = density.dim();
    for row in pixels {
        if row.len() != d {
            return Err(OdeError::Dimension { dim: d, len: row.len() });
        }
        if let Some(&bad) = row.iter().find(|v| !(0..=255).contains(*v)) {
            return Err(OdeError::Pixel(bad));
        }
    }
    let per_example = pixels
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let mut dequant = indexed_substream(seed, STREAM_DEQUANT, i as u64);
            let mut probes = indexed_substream(seed, STREAM_PROBES, i as u64);
            let mut logs = Vec::with_capacity(k);
            for _ in 0..k {
                let y: Vec<f64> = row
                    .iter()
                    .map(|&p| from_pixel_space(p as f64 + dequant.random::<f64>()))
                    .collect();
                logs.push(density.log_density(&y, &mut probes)?);
            }
            let ll = log_sum_exp(&logs) - (k as f64).ln();
            Ok(-ll / (d as f64 * std::f64::consts::LN_2) + 7.0)
        })
        .collect::<Result<Vec<f64>, OdeError>>()?;
    let n = per_example.len() as f64;
    let mean = per_example.iter().sum::<f64>() / n;
    let var = if per_example.len() > 1 {
        per_example.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(BpdReport {
        per_example,
        mean,
        stderr: (var / n).sqrt(),
    })
}
