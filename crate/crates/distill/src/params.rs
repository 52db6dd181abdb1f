//! Named parameter storage shared by networks, adaption layers, the policy
//! layer and hint projections.
//!
//! A store owns plain value tensors. Each training step *binds* the store onto
//! a fresh tape, which yields watched leaf tensors; after backward, gradients
//! are fetched through the binding. Frozen stores bind to constants, so their
//! parameters never appear on a tape.

use sha2::{Digest, Sha256};
use tapegrad::{GradMap, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let mut value = value;
        value.set_requires_grad(true);
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Marks every parameter as non-differentiable.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.value.set_requires_grad(false);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.value.requires_grad())
    }

    /// Watches every trainable parameter on `tape`; frozen parameters come
    /// back as constants.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound {
            tensors: self.params.iter().map(|p| tape.watch(&p.value)).collect(),
        }
    }

    /// Binds every parameter as a constant, regardless of trainability.
    pub fn bind_const(&self) -> Bound {
        Bound {
            tensors: self.params.iter().map(|p| p.value.detach()).collect(),
        }
    }

    /// SHA-256 over parameter names, shapes and exact value bits.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for d in p.value.shape() {
                hasher.update(d.to_le_bytes());
            }
            for v in p.value.values() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params.iter().map(|p| p.value.len()).collect()
    }
}

/// Tape-bound view of a store for one step.
pub struct Bound {
    pub tensors: Vec<Tensor>,
}

impl Bound {
    pub fn get(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    /// Gradient slice for the idx-th parameter, if backward reached it.
    pub fn grad<'g>(&self, idx: usize, grads: &'g GradMap) -> Option<&'g [f64]> {
        grads.get(&self.tensors[idx])
    }

    /// True when any parameter of this binding received a gradient.
    pub fn any_grad(&self, grads: &GradMap) -> bool {
        self.tensors.iter().any(|t| grads.contains(t))
    }
}
