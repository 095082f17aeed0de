//! Named parameter collections.

use alloc::collections::BTreeMap;
use alloc::string::String;

use thiserror::Error;

use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("tensor `{name}` missing from {side} checkpoint")]
    MissingTensor { name: String, side: &'static str },
    #[error("tensor `{name}` has shape {left} vs {right}")]
    ShapeMismatch {
        name: String,
        left: Shape,
        right: Shape,
    },
    #[error("need at least {needed} checkpoints, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Ordered map from tensor name to tensor, plus free-form string metadata.
///
/// Iteration is lexicographic by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Same name set and per-name equal shapes.
    pub fn check_compatible(&self, other: &Checkpoint) -> Result<(), CheckpointError> {
        for (name, t) in &self.tensors {
            let o = other
                .tensors
                .get(name)
                .ok_or_else(|| CheckpointError::MissingTensor {
                    name: name.clone(),
                    side: "right",
                })?;
            if t.shape() != o.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    left: t.shape().clone(),
                    right: o.shape().clone(),
                });
            }
        }
        if let Some(name) = other.tensors.keys().find(|n| !self.tensors.contains_key(*n)) {
            return Err(CheckpointError::MissingTensor {
                name: name.clone(),
                side: "left",
            });
        }
        Ok(())
    }

    pub fn is_compatible(&self, other: &Checkpoint) -> bool {
        self.check_compatible(other).is_ok()
    }

    /// Build a checkpoint by combining same-named tensors of two compatible
    /// checkpoints. Metadata is left empty.
    pub fn zip_map(
        &self,
        other: &Checkpoint,
        mut f: impl FnMut(&str, &Tensor, &Tensor) -> Result<Tensor, CheckpointError>,
    ) -> Result<Checkpoint, CheckpointError> {
        self.check_compatible(other)?;
        let mut out = Checkpoint::new();
        for (name, a) in &self.tensors {
            let b = &other.tensors[name];
            out.tensors.insert(name.clone(), f(name, a, b)?);
        }
        Ok(out)
    }
}

impl FromIterator<(String, Tensor)> for Checkpoint {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Checkpoint {
            tensors: iter.into_iter().collect(),
            metadata: BTreeMap::new(),
        }
    }
}

/// Per-tensor `lambda_a * a + lambda_b * b` over a whole checkpoint.
pub fn lerp_checkpoint(
    a: &Checkpoint,
    b: &Checkpoint,
    lambda_a: f64,
    lambda_b: f64,
) -> Result<Checkpoint, CheckpointError> {
    a.zip_map(b, |_, x, y| {
        Ok(crate::tensor::lerp_tensor(x, y, lambda_a, lambda_b)?)
    })
}
