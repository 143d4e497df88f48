//! Versioned checkpoint serialization with a shape manifest.
//! Save -> load -> save is byte-identical.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub data: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn from_tensors(named: &[(String, &Tensor)]) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            names: named.iter().map(|(n, _)| n.clone()).collect(),
            shapes: named.iter().map(|(_, t)| t.shape().to_vec()).collect(),
            data: named.iter().map(|(_, t)| t.data().to_vec()).collect(),
        }
    }

    pub fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CoreError::Contract(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut out = Vec::with_capacity(self.names.len());
        for i in 0..self.names.len() {
            out.push((
                self.names[i].clone(),
                Tensor::new(self.shapes[i].clone(), self.data[i].clone())?,
            ));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Restores into an equally shaped tensor list.
    pub fn restore_into(&self, params: &mut [&mut Tensor]) -> Result<()> {
        let tensors = self.tensors()?;
        if tensors.len() != params.len() {
            return Err(CoreError::Contract(format!(
                "checkpoint holds {} tensors, target has {}",
                tensors.len(),
                params.len()
            )));
        }
        for (slot, (name, t)) in params.iter_mut().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(CoreError::Contract(format!(
                    "shape mismatch for {name}: {:?} vs {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            **slot = t;
        }
        Ok(())
    }
}
