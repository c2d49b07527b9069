//! Desk-scale datasets.
//!
//! Two-dimensional toy densities with exact samplers, plus a small
//! quantized dataset in `{0..255}^d` for exercising the bits-per-dimension
//! pipeline.
//!
//! The checkerboard is uniform over the eight cells `(i, j)` with `i + j`
//! even of the 4×4 unit-cell partition of `[−2, 2]²`; its density is `1/8`
//! on the support. Cell `(i, j)` covers `[i − 2, i − 1) × [j − 2, j − 1)`.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{substream, STREAM_DATA};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error("unknown dataset kind `{0}`")]
    UnknownKind(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// Anything that can produce i.i.d. training points.
pub trait DataSource {
    fn dim(&self) -> usize;
    /// `n` points, flattened row-major into `n × dim`.
    fn draw(&self, rng: &mut Pcg64, n: usize) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyKind {
    Checkerboard,
    EightGaussians,
    TwoMoons,
    /// `N(0, I₂)`; handy for likelihood sanity checks.
    StandardNormal,
}

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
pub const EIGHT_GAUSSIANS_STD: f64 = 0.1;
/// Per-axis truncation (in standard deviations) of the eight-Gaussians noise.
const EIGHT_GAUSSIANS_TRUNCATION: f64 = 5.0;
/// `P(|Z| ≤ 5)` for a standard normal `Z`: `1 − 2Φ(−5)`.
const TRUNCATED_MASS: f64 = 1.0 - 2.0 * 2.866_515_718_791_939e-7;
const MOONS_NOISE: f64 = 0.1;
const MOONS_NOISE_CLIP: f64 = 0.3;

/// Axis-aligned box containing every sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Support {
    pub lower: [f64; 2],
    pub upper: [f64; 2],
}

impl Support {
    pub fn contains(&self, p: &[f64]) -> bool {
        (0..2).all(|k| p[k] >= self.lower[k] && p[k] <= self.upper[k])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub kind: ToyKind,
}

impl ToyKind {
    pub fn name(&self) -> &'static str {
        match self {
            ToyKind::Checkerboard => "checkerboard",
            ToyKind::EightGaussians => "eight_gaussians",
            ToyKind::TwoMoons => "two_moons",
            ToyKind::StandardNormal => "standard_normal",
        }
    }

    pub fn parse(name: &str) -> Result<Self, DataError> {
        match name {
            "checkerboard" => Ok(ToyKind::Checkerboard),
            "eight_gaussians" => Ok(ToyKind::EightGaussians),
            "two_moons" => Ok(ToyKind::TwoMoons),
            "standard_normal" => Ok(ToyKind::StandardNormal),
            other => Err(DataError::UnknownKind(other.to_string())),
        }
    }
}

/// Checkerboard cell index of a point (unit cells on `[−2, 2]²`).
pub fn checkerboard_cell(p: &[f64]) -> (i64, i64) {
    ((p[0] + 2.0).floor() as i64, (p[1] + 2.0).floor() as i64)
}

pub fn in_checkerboard(p: &[f64]) -> bool {
    if !(p[0] >= -2.0 && p[0] < 2.0 && p[1] >= -2.0 && p[1] < 2.0) {
        return false;
    }
    let (i, j) = checkerboard_cell(p);
    (i + j) % 2 == 0
}

fn eight_gaussian_centers() -> [[f64; 2]; 8] {
    let mut c = [[0.0; 2]; 8];
    for (k, ck) in c.iter_mut().enumerate() {
        let angle = k as f64 * std::f64::consts::FRAC_PI_4;
        *ck = [EIGHT_GAUSSIANS_RADIUS * angle.cos(), EIGHT_GAUSSIANS_RADIUS * angle.sin()];
    }
    c
}

pub fn eight_gaussians_centers() -> Vec<[f64; 2]> {
    eight_gaussian_centers().to_vec()
}

fn truncated_normal(rng: &mut Pcg64, limit: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= limit {
            return z;
        }
    }
}

impl ToyDataset {
    pub fn new(kind: ToyKind) -> Self {
        Self { kind }
    }

    pub fn support(&self) -> Support {
        match self.kind {
            ToyKind::Checkerboard => Support {
                lower: [-2.0, -2.0],
                upper: [2.0, 2.0],
            },
            ToyKind::EightGaussians => {
                let r = EIGHT_GAUSSIANS_RADIUS + EIGHT_GAUSSIANS_TRUNCATION * EIGHT_GAUSSIANS_STD;
                Support {
                    lower: [-r, -r],
                    upper: [r, r],
                }
            }
            ToyKind::TwoMoons => Support {
                lower: [-1.0 - MOONS_NOISE_CLIP, -0.5 - MOONS_NOISE_CLIP],
                upper: [2.0 + MOONS_NOISE_CLIP, 1.0 + MOONS_NOISE_CLIP],
            },
            ToyKind::StandardNormal => Support {
                lower: [f64::NEG_INFINITY; 2],
                upper: [f64::INFINITY; 2],
            },
        }
    }

    /// Exact density where a closed form exists.
    pub fn density(&self, p: &[f64]) -> Option<f64> {
        match self.kind {
            ToyKind::Checkerboard => Some(if in_checkerboard(p) { 0.125 } else { 0.0 }),
            ToyKind::EightGaussians => {
                let s = EIGHT_GAUSSIANS_STD;
                let lim = EIGHT_GAUSSIANS_TRUNCATION * s;
                let norm = 1.0 / (2.0 * std::f64::consts::PI * s * s * TRUNCATED_MASS * TRUNCATED_MASS);
                let total: f64 = eight_gaussian_centers()
                    .iter()
                    .filter(|c| (p[0] - c[0]).abs() <= lim && (p[1] - c[1]).abs() <= lim)
                    .map(|c| {
                        let sq = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
                        norm * (-0.5 * sq / (s * s)).exp()
                    })
                    .sum();
                Some(total / 8.0)
            }
            ToyKind::StandardNormal => {
                Some((-0.5 * (p[0] * p[0] + p[1] * p[1])).exp() / (2.0 * std::f64::consts::PI))
            }
            ToyKind::TwoMoons => None,
        }
    }

    /// Differential entropy in nats, where known in closed form.
    pub fn entropy(&self) -> Option<f64> {
        match self.kind {
            ToyKind::Checkerboard => Some(8.0f64.ln()),
            ToyKind::StandardNormal => Some((2.0 * std::f64::consts::PI * std::f64::consts::E).ln()),
            _ => None,
        }
    }

    fn draw_one(&self, rng: &mut Pcg64) -> [f64; 2] {
        match self.kind {
            ToyKind::Checkerboard => {
                let cell = rng.random_range(0..8usize);
                let i = cell / 2;
                // Rows alternate which columns are filled so that i + j is even.
                let j = 2 * (cell % 2) + (i % 2);
                let u: f64 = rng.random();
                let v: f64 = rng.random();
                [i as f64 - 2.0 + u, j as f64 - 2.0 + v]
            }
            ToyKind::EightGaussians => {
                let c = eight_gaussian_centers()[rng.random_range(0..8usize)];
                let zx = truncated_normal(rng, EIGHT_GAUSSIANS_TRUNCATION);
                let zy = truncated_normal(rng, EIGHT_GAUSSIANS_TRUNCATION);
                [c[0] + EIGHT_GAUSSIANS_STD * zx, c[1] + EIGHT_GAUSSIANS_STD * zy]
            }
            ToyKind::TwoMoons => {
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let upper: bool = rng.random();
                let base = if upper {
                    [angle.cos(), angle.sin()]
                } else {
                    [1.0 - angle.cos(), 0.5 - angle.sin()]
                };
                let clip = MOONS_NOISE_CLIP / MOONS_NOISE;
                [
                    base[0] + MOONS_NOISE * truncated_normal(rng, clip),
                    base[1] + MOONS_NOISE * truncated_normal(rng, clip),
                ]
            }
            ToyKind::StandardNormal => [rng.sample(StandardNormal), rng.sample(StandardNormal)],
        }
    }

    /// `n` i.i.d. points from the `data` substream of `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = substream(seed, STREAM_DATA);
        (0..n).map(|_| self.draw_one(&mut rng)).collect()
    }
}

impl DataSource for ToyDataset {
    fn dim(&self) -> usize {
        2
    }

    fn draw(&self, rng: &mut Pcg64, n: usize) -> Vec<f64> {
        (0..n).flat_map(|_| self.draw_one(rng)).collect()
    }
}

/// Uniform resampling of a fixed point set.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDataset {
    dim: usize,
    points: Vec<Vec<f64>>,
}

impl FiniteDataset {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self, DataError> {
        let dim = points.first().map(|p| p.len()).unwrap_or(0);
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(DataError::Invalid("points must be non-empty with equal dimension".into()));
        }
        Ok(Self { dim, points })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }
}

impl DataSource for FiniteDataset {
    fn dim(&self) -> usize {
        self.dim
    }

    fn draw(&self, rng: &mut Pcg64, n: usize) -> Vec<f64> {
        (0..n)
            .flat_map(|_| self.points[rng.random_range(0..self.points.len())].clone())
            .collect()
    }
}

/// Isotropic Gaussian mixture in the model space `[−1, 1]^d` that generates
/// the quantized dataset. Every coordinate of component `k` sits at `centers[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMixture {
    pub centers: Vec<f64>,
    pub std: f64,
}

impl Default for QuantizedMixture {
    fn default() -> Self {
        Self {
            centers: vec![-0.5, 0.0, 0.5],
            std: 0.15,
        }
    }
}

/// Pixel transform `φ(y) = 2⁷(y + 1)` from `[−1, 1]` to `[0, 256]`.
pub fn to_pixel_space(y: f64) -> f64 {
    128.0 * (y + 1.0)
}

/// Inverse transform `φ⁻¹(x) = x / 2⁷ − 1`.
pub fn from_pixel_space(x: f64) -> f64 {
    x / 128.0 - 1.0
}

impl QuantizedMixture {
    /// Draws `n` points, maps them through `φ`, rounds and clamps to `0..=255`.
    pub fn sample(&self, d: usize, n: usize, seed: u64) -> Result<Vec<Vec<u8>>, DataError> {
        if d == 0 || d > 8 {
            return Err(DataError::Invalid(format!("d = {d} must lie in 1..=8")));
        }
        if self.centers.is_empty() || !(self.std >= 0.0) {
            return Err(DataError::Invalid("mixture needs centers and std >= 0".into()));
        }
        let mut rng = substream(seed, STREAM_DATA);
        Ok((0..n)
            .map(|_| {
                let c = self.centers[rng.random_range(0..self.centers.len())];
                (0..d)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        to_pixel_space(c + self.std * z).round().clamp(0.0, 255.0) as u8
                    })
                    .collect()
            })
            .collect())
    }

    /// Log density of the (continuous, untransformed) mixture at `y`.
    pub fn log_density(&self, y: &[f64]) -> f64 {
        let d = y.len() as f64;
        let s2 = self.std * self.std;
        let terms: Vec<f64> = self
            .centers
            .iter()
            .map(|c| {
                let sq: f64 = y.iter().map(|v| (v - c) * (v - c)).sum();
                -0.5 * sq / s2 - 0.5 * d * (2.0 * std::f64::consts::PI * s2).ln()
            })
            .collect();
        crate::oracle::log_sum_exp(&terms) - (self.centers.len() as f64).ln()
    }
}

/// Quantized synthetic dataset from the default mixture.
pub fn quantized_synthetic(d: usize, n: usize, seed: u64) -> Result<Vec<Vec<u8>>, DataError> {
    QuantizedMixture::default().sample(d, n, seed)
}

/// Writes `kind,seed,n` metadata, then a header `x0,…` and one row per point.
pub fn write_dataset_csv<W: Write>(
    writer: W,
    kind: &str,
    seed: u64,
    points: &[Vec<f64>],
) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    w.write_record(["kind", "seed", "n"])?;
    w.write_record([kind.to_string(), seed.to_string(), points.len().to_string()])?;
    let dim = points.first().map(|p| p.len()).unwrap_or(0);
    w.write_record((0..dim).map(|k| format!("x{k}")))?;
    for p in points {
        w.write_record(p.iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub kind: String,
    pub seed: u64,
    pub points: Vec<Vec<f64>>,
}

pub fn read_dataset_csv<R: Read>(reader: R) -> Result<DatasetFile, DataError> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = r.records();
    let mut next = |what: &str| -> Result<csv::StringRecord, DataError> {
        records
            .next()
            .ok_or_else(|| DataError::Format(format!("missing {what}")))?
            .map_err(DataError::from)
    };
    let meta_header = next("metadata header")?;
    if meta_header.iter().collect::<Vec<_>>() != ["kind", "seed", "n"] {
        return Err(DataError::Format("expected `kind,seed,n` header".into()));
    }
    let meta = next("metadata row")?;
    let kind = meta.get(0).unwrap_or_default().to_string();
    let seed = meta
        .get(1)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DataError::Format("bad seed".into()))?;
    let n: usize = meta
        .get(2)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| DataError::Format("bad n".into()))?;
    let header = next("column header")?;
    let dim = header.len();
    let mut points = Vec::with_capacity(n);
    for rec in records {
        let rec = rec?;
        if rec.len() != dim {
            return Err(DataError::Format(format!("row has {} fields, expected {dim}", rec.len())));
        }
        let row: Result<Vec<f64>, _> = rec.iter().map(|s| s.parse::<f64>()).collect();
        points.push(row.map_err(|e| DataError::Format(e.to_string()))?);
    }
    if points.len() != n {
        return Err(DataError::Format(format!("expected {n} rows, found {}", points.len())));
    }
    Ok(DatasetFile { kind, seed, points })
}
