//! Versioned JSON checkpoints shared by the three networks.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameters, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// `reward`, `reconstruction` or `proxy`.
    pub kind: String,
    /// Architecture metadata needed to rebuild the network.
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value, params: &Parameters) -> Self {
        let tensors = params
            .iter()
            .map(|(name, t)| NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            kind: kind.to_string(),
            meta,
            tensors,
        }
    }

    /// Copies stored tensors into `params`, checking names and shapes.
    pub fn restore_into(&self, kind: &str, params: &mut Parameters) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        if self.tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                params.len(),
                self.tensors.len()
            )));
        }
        for (i, nt) in self.tensors.iter().enumerate() {
            if nt.name != params.name(i) || nt.shape != params.get(i).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} is `{}` {:?}, expected `{}` {:?}",
                    nt.name,
                    nt.shape,
                    params.name(i),
                    params.get(i).shape()
                )));
            }
            *params.get_mut(i) = Tensor::new(nt.shape.clone(), nt.values.clone())?;
        }
        params.zero_grads();
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}
