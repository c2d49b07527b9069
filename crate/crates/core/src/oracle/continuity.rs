//! Grid check of the continuity equation `∂_t p + div(p u) = 0`.
//!
//! Both derivatives use second-order central differences, so for a field
//! that truly generates its density the residual is pure discretization
//! error and shrinks like `h²` under refinement. The report carries `h²`
//! next to the residual for that reason.

use std::io::Write;

use rayon::prelude::*;

use super::OracleError;

/// A time-dependent density together with the velocity field claimed to transport it.
pub trait DensityField {
    fn dim(&self) -> usize;
    fn density(&self, t: f64, x: &[f64]) -> f64;
    fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64>;
}

impl<F: DensityField + ?Sized> DensityField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn density(&self, t: f64, x: &[f64]) -> f64 {
        (**self).density(t, x)
    }
    fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        (**self).velocity(t, x)
    }
}

/// Time reversal: density `p_{1−t}` with field `−u_{1−t}`.
#[derive(Debug, Clone)]
pub struct Reversed<F>(F);

impl<F> Reversed<F> {
    pub fn new(inner: F) -> Self {
        Self(inner)
    }
}

impl<F: DensityField> DensityField for Reversed<F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn density(&self, t: f64, x: &[f64]) -> f64 {
        self.0.density(1.0 - t, x)
    }
    fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.0.velocity(1.0 - t, x).into_iter().map(|v| -v).collect()
    }
}

/// The inner field plus a constant drift; does not generate the inner density.
#[derive(Debug, Clone)]
pub struct Drifted<F> {
    inner: F,
    drift: Vec<f64>,
}

impl<F> Drifted<F> {
    pub fn new(inner: F, drift: Vec<f64>) -> Self {
        Self { inner, drift }
    }
}

impl<F: DensityField> DensityField for Drifted<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn density(&self, t: f64, x: &[f64]) -> f64 {
        self.inner.density(t, x)
    }
    fn velocity(&self, t: f64, x: &[f64]) -> Vec<f64> {
        self.inner
            .velocity(t, x)
            .into_iter()
            .zip(&self.drift)
            .map(|(v, c)| v + c)
            .collect()
    }
}

/// Space-time grid: `points` nodes per axis on `[lower, upper]`, and
/// `time_steps` slices spaced `dt` apart centred on `t_center`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: usize,
    pub t_center: f64,
    pub dt: f64,
    pub time_steps: usize,
}

impl GridSpec {
    /// Cube `[-half_width, half_width]^dim`.
    pub fn cube(
        dim: usize,
        half_width: f64,
        points: usize,
        t_center: f64,
        dt: f64,
        time_steps: usize,
    ) -> Self {
        Self {
            lower: vec![-half_width; dim],
            upper: vec![half_width; dim],
            points,
            t_center,
            dt,
            time_steps,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let d = self.dim();
        if d == 0 || d > 3 || self.upper.len() != d {
            return Err(OracleError::GridDimension(d));
        }
        if self.points < 3 {
            return Err(OracleError::GridTooCoarse(format!(
                "{} points per axis, need at least 3",
                self.points
            )));
        }
        if self.time_steps < 3 || self.time_steps % 2 == 0 {
            return Err(OracleError::GridTooCoarse(format!(
                "{} time slices, need an odd count of at least 3",
                self.time_steps
            )));
        }
        if !(self.dt > 0.0) || self.lower.iter().zip(&self.upper).any(|(l, u)| !(u > l)) {
            return Err(OracleError::GridTooCoarse("degenerate extents".into()));
        }
        Ok(())
    }

    /// Largest spatial spacing.
    pub fn spacing(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| (u - l) / (self.points - 1) as f64)
            .fold(0.0, f64::max)
    }

    /// Same extents with half the spatial and temporal spacing.
    pub fn refined(&self) -> Self {
        Self {
            points: 2 * (self.points - 1) + 1,
            dt: 0.5 * self.dt,
            ..self.clone()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        let half = (self.time_steps / 2) as f64;
        (0..self.time_steps)
            .map(|k| self.t_center + (k as f64 - half) * self.dt)
            .collect()
    }

    fn node(&self, flat: usize) -> Vec<f64> {
        let mut rem = flat;
        let mut x = vec![0.0; self.dim()];
        for axis in (0..self.dim()).rev() {
            let i = rem % self.points;
            rem /= self.points;
            let h = (self.upper[axis] - self.lower[axis]) / (self.points - 1) as f64;
            x[axis] = self.lower[axis] + i as f64 * h;
        }
        x
    }

    fn is_interior(&self, flat: usize) -> bool {
        let mut rem = flat;
        for _ in 0..self.dim() {
            let i = rem % self.points;
            rem /= self.points;
            if i == 0 || i + 1 == self.points {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub t: f64,
    pub h: f64,
    pub max_residual: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualReport {
    pub rows: Vec<ResidualRow>,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub h: f64,
    pub h_squared: f64,
}

impl ResidualReport {
    /// CSV with header `t,grid_h,max_residual,mean_residual`.
    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["t", "grid_h", "max_residual", "mean_residual"])?;
        for row in &self.rows {
            w.write_record([
                row.t.to_string(),
                row.h.to_string(),
                row.max_residual.to_string(),
                row.mean_residual.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Max and mean of `|∂_t p + div(p u)|` over interior grid nodes and interior time slices.
pub fn continuity_residual<F>(field: &F, grid: &GridSpec) -> Result<ResidualReport, OracleError>
where
    F: DensityField + Sync + ?Sized,
{
    grid.validate()?;
    let d = grid.dim();
    if field.dim() != d {
        return Err(OracleError::Dimension);
    }
    let n_nodes = grid.points.pow(d as u32);
    let nodes: Vec<Vec<f64>> = (0..n_nodes).map(|i| grid.node(i)).collect();
    let spacing: Vec<f64> = (0..d)
        .map(|a| (grid.upper[a] - grid.lower[a]) / (grid.points - 1) as f64)
        .collect();
    let strides: Vec<usize> = (0..d).map(|a| grid.points.pow((d - 1 - a) as u32)).collect();
    let times = grid.times();

    let densities: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| nodes.par_iter().map(|x| field.density(t, x)).collect())
        .collect();

    let mut rows = Vec::new();
    let mut overall_max = 0.0f64;
    let mut overall_sum = 0.0;
    let mut overall_count = 0usize;
    for k in 1..times.len() - 1 {
        let t = times[k];
        let flux: Vec<Vec<f64>> = nodes
            .par_iter()
            .zip(&densities[k])
            .map(|(x, p)| field.velocity(t, x).into_iter().map(|u| p * u).collect())
            .collect();
        let residuals: Vec<f64> = (0..n_nodes)
            .into_par_iter()
            .filter(|&i| grid.is_interior(i))
            .map(|i| {
                let dp_dt = (densities[k + 1][i] - densities[k - 1][i]) / (2.0 * grid.dt);
                let div: f64 = (0..d)
                    .map(|a| {
                        (flux[i + strides[a]][a] - flux[i - strides[a]][a]) / (2.0 * spacing[a])
                    })
                    .sum();
                (dp_dt + div).abs()
            })
            .collect();
        let max = residuals.iter().cloned().fold(0.0, f64::max);
        let sum: f64 = residuals.iter().sum();
        overall_max = overall_max.max(max);
        overall_sum += sum;
        overall_count += residuals.len();
        rows.push(ResidualRow {
            t,
            h: grid.spacing(),
            max_residual: max,
            mean_residual: sum / residuals.len() as f64,
        });
    }
    let h = grid.spacing();
    Ok(ResidualReport {
        rows,
        max_residual: overall_max,
        mean_residual: overall_sum / overall_count as f64,
        h,
        h_squared: h * h,
    })
}
