//! Named-tensor checkpoint container.
//!
//! On-disk layout (JSON, UTF-8):
//!
//! ```text
//! {
//!   "format": "flowmatch-checkpoint",
//!   "version": 1,
//!   "metadata": { ... free-form, written by the caller ... },
//!   "tensors": [ { "name": "layer0.weight", "shape": [3, 64], "data": [ ... ] }, ... ]
//! }
//! ```
//!
//! `data` is row-major. Floats are written with shortest round-trip
//! formatting, so save → load reproduces every value bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Tensor};

pub const CHECKPOINT_FORMAT: &str = "flowmatch-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub metadata: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            data: tensor.data().to_vec(),
        });
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor, AutodiffError> {
        let entry = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| AutodiffError::Checkpoint(format!("missing tensor `{name}`")))?;
        Tensor::new(entry.shape.clone(), entry.data.clone())
    }

    pub fn to_json(&self) -> Result<String, AutodiffError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, AutodiffError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(AutodiffError::Checkpoint(format!(
                "unexpected format `{}`",
                ckpt.format
            )));
        }
        if ckpt.version > CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        for t in &ckpt.tensors {
            Tensor::new(t.shape.clone(), t.data.clone())?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), AutodiffError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AutodiffError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut ckpt = Checkpoint::new(serde_json::json!({"note": "x"}));
        let t = Tensor::matrix(2, 2, vec![0.1, 1.0 / 3.0, -2.5e-300, std::f64::consts::PI]).unwrap();
        ckpt.push("w", &t);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        let t2 = back.tensor("w").unwrap();
        for (a, b) in t.data().iter().zip(t2.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_foreign_format_and_bad_shapes() {
        let bad = r#"{"format":"other","version":1,"tensors":[]}"#;
        assert!(Checkpoint::from_json(bad).is_err());
        let bad = r#"{"format":"flowmatch-checkpoint","version":1,"tensors":[{"name":"a","shape":[3],"data":[1.0]}]}"#;
        assert!(Checkpoint::from_json(bad).is_err());
        let ok = Checkpoint::new(serde_json::Value::Null);
        assert!(ok.tensor("nope").is_err());
    }
}
