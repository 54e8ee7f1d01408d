use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;

use super::container::{read_container, write_container};
use crate::error::{GwqError, Result};
use crate::tensor::Tensor;

pub const GRAD_SUFFIX: &str = ".grad";

/// Named tensors in file order plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelBundle {
    pub tensors: IndexMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts under the tensor's own name; an existing entry is replaced in place.
    pub fn insert(&mut self, tensor: Tensor) {
        self.tensors.insert(tensor.name().to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| GwqError::Input(format!("missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// Gradients keyed by the weight they belong to.
///
/// On disk every entry is named `<weight>.grad`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradientBundle {
    pub tensors: IndexMap<String, Tensor>,
}

impl GradientBundle {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a gradient for `weight`; the stored tensor is renamed to the weight name.
    pub fn insert(&mut self, weight: &str, grad: Tensor) {
        self.tensors
            .insert(weight.to_string(), grad.renamed(weight.to_string()));
    }

    pub fn get(&self, weight: &str) -> Option<&Tensor> {
        self.tensors.get(weight)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Checks that this bundle covers every weight of `weights` with matching dims.
    pub fn check_aligned(&self, weights: &ModelBundle) -> Result<()> {
        for (name, g) in &self.tensors {
            let w = weights.get(name).ok_or_else(|| {
                GwqError::Alignment(format!(
                    "gradient `{name}{GRAD_SUFFIX}` has no matching weight tensor"
                ))
            })?;
            if w.dims() != g.dims() {
                return Err(GwqError::Alignment(format!(
                    "gradient `{name}{GRAD_SUFFIX}` dims {:?} do not match weight `{name}` dims {:?}",
                    g.dims(),
                    w.dims()
                )));
            }
        }
        if let Some(missing) = weights.tensors.keys().find(|n| !self.tensors.contains_key(*n)) {
            return Err(GwqError::Alignment(format!(
                "weight `{missing}` has no gradient `{missing}{GRAD_SUFFIX}`"
            )));
        }
        Ok(())
    }

    pub fn to_container(&self) -> ModelBundle {
        let mut out = ModelBundle::new();
        for (name, g) in &self.tensors {
            out.insert(g.clone().renamed(format!("{name}{GRAD_SUFFIX}")));
        }
        out
    }

    pub fn from_container(bundle: ModelBundle) -> Result<Self> {
        let mut out = GradientBundle::new();
        for (name, t) in bundle.tensors {
            let weight = name.strip_suffix(GRAD_SUFFIX).ok_or_else(|| {
                GwqError::Alignment(format!("tensor `{name}` lacks the `{GRAD_SUFFIX}` suffix"))
            })?;
            out.insert(weight, t);
        }
        Ok(out)
    }
}

pub fn write_gradients(grads: &GradientBundle, path: &Path) -> Result<()> {
    write_container(&grads.to_container(), path)
}

/// Loads `<weight>.grad` tensors and validates them against `weights`.
pub fn read_gradients(path: &Path, weights: &ModelBundle) -> Result<GradientBundle> {
    let grads = GradientBundle::from_container(read_container(path)?)?;
    grads.check_aligned(weights)?;
    Ok(grads)
}
