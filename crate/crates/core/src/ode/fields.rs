//! Vector fields acting on batches of points.

use crate::autodiff::{Tape, Tensor, Var};
use crate::model::FieldModel;
use crate::objectives::{to_vector_field_tape, Parameterization};
use crate::oracle::MixtureOracle;
use crate::paths::PathSchedule;

use super::OdeError;

/// A time-dependent field on `ℝ^d`, evaluated on `n` points stored
/// row-major in one slice of length `n·d`.
pub trait BatchField: Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OdeError>;

    /// The velocity together with one vector–Jacobian product
    /// `wᵀ ∂v/∂x` (per point) for each cotangent `w` in `cotangents`.
    fn velocity_vjps(
        &self,
        t: f64,
        x: &[f64],
        cotangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), OdeError>;
}

impl<F: BatchField + ?Sized> BatchField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OdeError> {
        (**self).velocity(t, x)
    }

    fn velocity_vjps(
        &self,
        t: f64,
        x: &[f64],
        cotangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), OdeError> {
        (**self).velocity_vjps(t, x, cotangents)
    }
}

fn check_len(dim: usize, x: &[f64]) -> Result<(), OdeError> {
    if dim == 0 || x.len() % dim != 0 {
        return Err(OdeError::Dimension { dim, len: x.len() });
    }
    Ok(())
}

/// `v ≡ 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroField {
    pub dim: usize,
}

impl BatchField for ZeroField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, _: f64, x: &[f64]) -> Result<Vec<f64>, OdeError> {
        check_len(self.dim, x)?;
        Ok(vec![0.0; x.len()])
    }

    fn velocity_vjps(
        &self,
        _: f64,
        x: &[f64],
        cotangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), OdeError> {
        check_len(self.dim, x)?;
        Ok((vec![0.0; x.len()], cotangents.iter().map(|c| vec![0.0; c.len()]).collect()))
    }
}

/// `v(x) = A x` with `A` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearField {
    dim: usize,
    a: Vec<f64>,
}

impl LinearField {
    pub fn new(dim: usize, a: Vec<f64>) -> Result<Self, OdeError> {
        if a.len() != dim * dim || dim == 0 {
            return Err(OdeError::Dimension { dim, len: a.len() });
        }
        Ok(Self { dim, a })
    }

    /// Divergence-free rotation `(−x₂, x₁)`.
    pub fn rotation() -> Self {
        Self {
            dim: 2,
            a: vec![0.0, -1.0, 1.0, 0.0],
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.a[i * self.dim + i]).sum()
    }

    fn apply(&self, x: &[f64], transpose: bool) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; x.len()];
        for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
            for i in 0..d {
                o[i] = (0..d)
                    .map(|j| {
                        let aij = if transpose { self.a[j * d + i] } else { self.a[i * d + j] };
                        aij * row[j]
                    })
                    .sum();
            }
        }
        out
    }
}

impl BatchField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn velocity(&self, _: f64, x: &[f64]) -> Result<Vec<f64>, OdeError> {
        check_len(self.dim, x)?;
        Ok(self.apply(x, false))
    }

    fn velocity_vjps(
        &self,
        _: f64,
        x: &[f64],
        cotangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), OdeError> {
        check_len(self.dim, x)?;
        Ok((self.apply(x, false), cotangents.iter().map(|c| self.apply(c, true)).collect()))
    }
}

/// Conditional field `u_t(x|x₁) = (σ'/σ)(x − a x₁) + a' x₁` of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalField {
    pub schedule: PathSchedule,
    pub x1: Vec<f64>,
}

impl ConditionalField {
    pub fn new(schedule: PathSchedule, x1: Vec<f64>) -> Self {
        Self { schedule, x1 }
    }
}

impl BatchField for ConditionalField {
    fn dim(&self) -> usize {
        self.x1.len()
    }

    fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OdeError> {
        check_len(self.dim(), x)?;
        let c = self.schedule.coefficients(t)?;
        let rate = c.rate();
        let d = self.dim();
        Ok(x.iter()
            .enumerate()
            .map(|(i, xi)| {
                let y = self.x1[i % d];
                rate * (xi - c.a * y) + c.da * y
            })
            .collect())
    }

    fn velocity_vjps(
        &self,
        t: f64,
        x: &[f64],
        cotangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), OdeError> {
        let v = self.velocity(t, x)?;
        let rate = self.schedule.coefficients(t)?.rate();
        Ok((v, cotangents.iter().map(|c| c.iter().map(|w| rate * w).collect()).collect()))
    }
}

/// `−v`.
#[derive(Debug, Clone)]
pub struct Negated<F>(pub F);

impl<F: BatchField> BatchField for Negated<F> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OdeError> {
        Ok(self.0.velocity(t, x)?.into_iter().map(|v| -v).collect())
    }

    fn velocity_vjps(
        &self,
        t: f64,
        x: &[f64],
        cotangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), OdeError> {
        let (v, j) = self.0.velocity_vjps(t, x, cotangents)?;
        let neg = |v: Vec<f64>| v.into_iter().map(|x| -x).collect::<Vec<_>>();
        Ok((neg(v), j.into_iter().map(neg).collect()))
    }
}

/// Marginal field of a mixture oracle. No Jacobian products.
pub struct OracleField<'a> {
    pub oracle: &'a MixtureOracle,
}

impl BatchField for OracleField<'_> {
    fn dim(&self) -> usize {
        self.oracle.dim()
    }

    fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OdeError> {
        check_len(self.dim(), x)?;
        let mut out = Vec::with_capacity(x.len());
        for p in x.chunks(self.dim()) {
            out.extend(self.oracle.marginal_vf(t, p).map_err(|e| OdeError::Field(e.to_string()))?);
        }
        Ok(out)
    }

    fn velocity_vjps(
        &self,
        _: f64,
        _: &[f64],
        _: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), OdeError> {
        Err(OdeError::Field("the oracle field has no Jacobian products".into()))
    }
}

/// A trained model read as a vector field: score and noise outputs are
/// converted through the schedule.
pub struct ModelField<'a> {
    model: &'a dyn FieldModel,
    schedule: PathSchedule,
}

impl<'a> ModelField<'a> {
    pub fn new(model: &'a dyn FieldModel, schedule: PathSchedule) -> Self {
        Self { model, schedule }
    }

    fn record<'t>(&self, tape: &'t Tape, t: f64, x: Var<'t>, rows: usize) -> Result<Var<'t>, OdeError> {
        let params: Vec<Var<'t>> = self.model.params().iter().map(|p| tape.constant(p.clone())).collect();
        let out = self.model.forward_tape(&params, &vec![t; rows], x)?;
        Ok(to_vector_field_tape(self.model.parameterization(), out, x, &self.schedule, t)?)
    }
}

impl BatchField for ModelField<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn velocity(&self, t: f64, x: &[f64]) -> Result<Vec<f64>, OdeError> {
        check_len(self.dim(), x)?;
        let rows = x.len() / self.dim();
        let xt = Tensor::new(vec![rows, self.dim()], x.to_vec())?;
        let out = self.model.forward_values(&vec![t; rows], &xt)?;
        let p = self.model.parameterization();
        if p == Parameterization::VectorField {
            return Ok(out.into_data());
        }
        Ok(crate::objectives::to_vector_field(p, out.data(), &self.schedule, t, x)?)
    }

    fn velocity_vjps(
        &self,
        t: f64,
        x: &[f64],
        cotangents: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), OdeError> {
        check_len(self.dim(), x)?;
        let rows = x.len() / self.dim();
        let shape = vec![rows, self.dim()];
        let tape = Tape::new();
        let xv = tape.leaf(Tensor::new(shape.clone(), x.to_vec())?);
        let v = self.record(&tape, t, xv, rows)?;
        let mut vjps = Vec::with_capacity(cotangents.len());
        for c in cotangents {
            let w = tape.constant(Tensor::new(shape.clone(), c.clone())?);
            let root = v.mul(&w)?.sum();
            vjps.push(tape.backward(root)?.get_or_zeros(xv).into_data());
        }
        Ok((v.value().into_data(), vjps))
    }
}
