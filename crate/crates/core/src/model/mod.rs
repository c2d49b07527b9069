//! Time-conditioned MLP vector fields.
//!
//! The network maps `[x, φ(t)]` through dense layers to `d` outputs, where
//! `φ(t)` is either `t` itself or a sinusoidal feature vector. Depending on
//! the configured parameterization the output is read as a vector field, a
//! score or a noise prediction.

mod optim;
mod train;

pub use optim::{Adam, AdamConfig, LrSchedule};
pub use train::{train, LossRecord, Objective, TrainConfig, TrainError, TrainReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{matmul_kernel, silu, AutodiffError, Checkpoint, Tape, Tensor, Var};
use crate::objectives::Parameterization;
use crate::rng::{substream, STREAM_INIT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    Tanh,
}

impl Activation {
    fn apply(&self, v: f64) -> f64 {
        match self {
            Activation::Silu => silu(v),
            Activation::Tanh => v.tanh(),
        }
    }

    fn record<'t>(&self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Silu => v.silu(),
            Activation::Tanh => v.tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeEmbedding {
    /// The scalar `t` appended to the input.
    Raw,
    /// `sin(2ʲπt), cos(2ʲπt)` for `j < frequencies`.
    Sinusoidal { frequencies: usize },
}

impl TimeEmbedding {
    pub fn width(&self) -> usize {
        match self {
            TimeEmbedding::Raw => 1,
            TimeEmbedding::Sinusoidal { frequencies } => 2 * frequencies,
        }
    }

    /// Feature matrix `[B, width]`.
    pub fn features(&self, t: &[f64]) -> Tensor {
        let w = self.width();
        let mut data = Vec::with_capacity(t.len() * w);
        for &ti in t {
            match self {
                TimeEmbedding::Raw => data.push(ti),
                TimeEmbedding::Sinusoidal { frequencies } => {
                    for j in 0..*frequencies {
                        let arg = std::f64::consts::PI * 2f64.powi(j as i32) * ti;
                        data.push(arg.sin());
                        data.push(arg.cos());
                    }
                }
            }
        }
        Tensor::from_parts(vec![t.len(), w], data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default = "default_embedding")]
    pub embedding: TimeEmbedding,
    #[serde(default = "default_parameterization")]
    pub parameterization: Parameterization,
}

fn default_widths() -> Vec<usize> {
    vec![64, 64, 64]
}

fn default_activation() -> Activation {
    Activation::Silu
}

fn default_embedding() -> TimeEmbedding {
    TimeEmbedding::Raw
}

fn default_parameterization() -> Parameterization {
    Parameterization::VectorField
}

impl ModelConfig {
    /// Three hidden layers of 64 SiLU units, raw time input.
    pub fn desk(dim: usize) -> Self {
        Self {
            dim,
            widths: default_widths(),
            activation: default_activation(),
            embedding: default_embedding(),
            parameterization: default_parameterization(),
        }
    }

    /// Five hidden layers of 512 units for 2D data.
    pub fn paper_2d() -> Self {
        Self {
            widths: vec![512; 5],
            ..Self::desk(2)
        }
    }

    pub fn preset(name: &str, dim: usize) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk(dim)),
            "paper-2d" if dim == 2 => Some(Self::paper_2d()),
            _ => None,
        }
    }

    pub fn with_parameterization(mut self, p: Parameterization) -> Self {
        self.parameterization = p;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dim == 0 {
            return Err(ModelError::Config("dim must be positive".into()));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(ModelError::Config("layer widths must be positive".into()));
        }
        if let TimeEmbedding::Sinusoidal { frequencies: 0 } = self.embedding {
            return Err(ModelError::Config("sinusoidal embedding needs frequencies >= 1".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.dim + self.embedding.width()
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_width()];
        sizes.extend(&self.widths);
        sizes.push(self.dim);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
}

/// Anything that can be evaluated on a tape as `(t, x) ↦ output`.
///
/// `params` are the tape variables bound to [`FieldModel::params`], in order.
pub trait FieldModel: Sync {
    fn dim(&self) -> usize;
    fn params(&self) -> &[Tensor];
    fn forward_tape<'t>(
        &self,
        params: &[Var<'t>],
        t: &[f64],
        x: Var<'t>,
    ) -> Result<Var<'t>, AutodiffError>;

    fn parameterization(&self) -> Parameterization {
        Parameterization::VectorField
    }

    /// Forward pass without gradient bookkeeping.
    fn forward_values(&self, t: &[f64], x: &Tensor) -> Result<Tensor, AutodiffError> {
        let tape = Tape::new();
        let params: Vec<Var> = self.params().iter().map(|p| tape.constant(p.clone())).collect();
        Ok(self.forward_tape(&params, t, tape.constant(x.clone()))?.value())
    }

    /// Binds every parameter as a leaf of `tape`.
    fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params().iter().map(|p| tape.leaf(p.clone())).collect()
    }
}

/// Dense network `v(t, x; θ)`. Parameters are stored as
/// `[W₀, b₀, W₁, b₁, …]` with `Wₖ: [fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    config: ModelConfig,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Uniform fan-in initialization `U(±1/√fan_in)` from the `init`
    /// substream of `seed`; the output layer starts at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = substream(seed, STREAM_INIT);
        let shapes = config.layer_shapes();
        let last = shapes.len() - 1;
        let mut params = Vec::with_capacity(2 * shapes.len());
        for (k, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            if k == last {
                params.push(Tensor::zeros(&[fan_in, fan_out]));
                params.push(Tensor::zeros(&[fan_out]));
                continue;
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            params.push(Tensor::from_parts(vec![fan_in, fan_out], w));
            params.push(Tensor::from_parts(vec![fan_out], b));
        }
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if params.len() != 2 * shapes.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                2 * shapes.len(),
                params.len()
            )));
        }
        for (k, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            if params[2 * k].shape() != [fan_in, fan_out] || params[2 * k + 1].shape() != [fan_out] {
                return Err(ModelError::Config(format!("layer {k} has the wrong shape")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn check_input(&self, t: &[f64], x: &[usize]) -> Result<(), AutodiffError> {
        if x.len() != 2 || x[1] != self.config.dim || x[0] != t.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mlp_forward",
                lhs: x.to_vec(),
                rhs: vec![t.len(), self.config.dim],
            });
        }
        Ok(())
    }

    /// Tape-free forward pass on `x: [B, d]`; bitwise equal to the taped one.
    pub fn forward(&self, t: &[f64], x: &Tensor) -> Result<Tensor, AutodiffError> {
        self.check_input(t, x.shape())?;
        let rows = t.len();
        let feats = self.config.embedding.features(t);
        let (dw, fw) = (self.config.dim, feats.cols());
        let mut h = Vec::with_capacity(rows * (dw + fw));
        for r in 0..rows {
            h.extend_from_slice(x.row(r));
            h.extend_from_slice(feats.row(r));
        }
        let shapes = self.config.layer_shapes();
        let last = shapes.len() - 1;
        for (k, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let mut z = matmul_kernel(&h, self.params[2 * k].data(), rows, fan_in, fan_out);
            let b = self.params[2 * k + 1].data();
            for (i, v) in z.iter_mut().enumerate() {
                *v += b[i % fan_out];
            }
            if k != last {
                for v in z.iter_mut() {
                    *v = self.config.activation.apply(*v);
                }
            }
            h = z;
        }
        Ok(Tensor::from_parts(vec![rows, self.config.dim], h))
    }

    pub fn to_checkpoint(&self, mut metadata: serde_json::Value) -> Checkpoint {
        if let serde_json::Value::Object(map) = &mut metadata {
            map.insert(
                "model".into(),
                serde_json::to_value(&self.config).expect("model config serializes"),
            );
        } else {
            metadata = serde_json::json!({ "model": self.config });
        }
        let mut ck = Checkpoint::new(metadata);
        for (k, pair) in self.params.chunks(2).enumerate() {
            ck.push(format!("layer{k}.weight"), &pair[0]);
            ck.push(format!("layer{k}.bias"), &pair[1]);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ModelError> {
        let config: ModelConfig = ck
            .metadata
            .get("model")
            .ok_or_else(|| ModelError::Metadata("missing `model` entry".into()))
            .and_then(|v| {
                serde_json::from_value(v.clone()).map_err(|e| ModelError::Metadata(e.to_string()))
            })?;
        let layers = config.layer_shapes().len();
        let mut params = Vec::with_capacity(2 * layers);
        for k in 0..layers {
            params.push(ck.tensor(&format!("layer{k}.weight"))?);
            params.push(ck.tensor(&format!("layer{k}.bias"))?);
        }
        Self::from_params(config, params)
    }
}

impl FieldModel for Mlp {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn parameterization(&self) -> Parameterization {
        self.config.parameterization
    }

    fn forward_values(&self, t: &[f64], x: &Tensor) -> Result<Tensor, AutodiffError> {
        self.forward(t, x)
    }

    fn forward_tape<'t>(
        &self,
        params: &[Var<'t>],
        t: &[f64],
        x: Var<'t>,
    ) -> Result<Var<'t>, AutodiffError> {
        self.check_input(t, &x.shape())?;
        let feats = x.tape().constant(self.config.embedding.features(t));
        let mut h = x.concat_cols(&feats)?;
        let layers = params.len() / 2;
        for k in 0..layers {
            h = h.matmul(&params[2 * k])?.add(&params[2 * k + 1])?;
            if k + 1 != layers {
                h = self.config.activation.record(h);
            }
        }
        Ok(h)
    }
}
