use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

pub const PARAM_FILE_FORMAT: &str = "mocap-nn-params";
pub const PARAM_FILE_VERSION: u32 = 1;

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Registers a tensor drawn from `U(-bound, bound)`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..bound)
                } else {
                    0.0
                }
            })
            .collect();
        self.add(name, Tensor::from_vec(shape, data).expect("length matches shape"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_all(&mut self) {
        for v in &mut self.values {
            v.fill(0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }

    pub fn to_file(&self) -> ParamFile {
        ParamFile {
            format: PARAM_FILE_FORMAT.to_string(),
            version: PARAM_FILE_VERSION,
            params: self
                .names
                .iter()
                .zip(&self.values)
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a parameter file. Names and shapes must match
    /// this store exactly, in order.
    pub fn load_file(&mut self, file: &ParamFile) -> Result<()> {
        if file.format != PARAM_FILE_FORMAT {
            return Err(NnError::Format(format!("unexpected format `{}`", file.format)));
        }
        if file.version != PARAM_FILE_VERSION {
            return Err(NnError::Format(format!(
                "unsupported version {} (expected {PARAM_FILE_VERSION})",
                file.version
            )));
        }
        if file.params.len() != self.values.len() {
            return Err(NnError::Format(format!(
                "expected {} parameters, file has {}",
                self.values.len(),
                file.params.len()
            )));
        }
        for (i, entry) in file.params.iter().enumerate() {
            if entry.name != self.names[i] {
                return Err(NnError::UnknownParam(entry.name.clone()));
            }
            if entry.shape != self.values[i].shape() {
                return Err(NnError::ShapeMismatch {
                    context: "ParamStore::load_file",
                    expected: self.values[i].shape().to_vec(),
                    actual: entry.shape.clone(),
                });
            }
            let t = Tensor::from_vec(&entry.shape, entry.values.clone())?;
            if !t.is_finite() {
                return Err(NnError::Format(format!("non-finite values in `{}`", entry.name)));
            }
            self.values[i] = t;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_file())?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_json(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let file: ParamFile = serde_json::from_str(&text)?;
        self.load_file(&file)
    }
}

/// Versioned on-disk form: a shape manifest with flat row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFile {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Gradients aligned with the parameters of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads {
    values: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.values.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}
