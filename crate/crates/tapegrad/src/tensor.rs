use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::NodeId;

/// A dense, row-major `f64` tensor, optionally attached to a tape node.
///
/// Values are shared behind an `Arc`, so cloning a tensor (and saving inputs
/// for backward) is cheap. A tensor with `node == None` is a constant from the
/// tape's point of view; `requires_grad` marks leaves that should be watched
/// before being used in differentiable positions.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Arc<Vec<f64>>,
    node: Option<NodeId>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a constant tensor, checking that `values` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::BadShape {
                op: "Tensor::new",
                expected: format!("{numel} values for shape {shape:?}"),
                found: vec![values.len()],
            });
        }
        Ok(Tensor {
            shape,
            values: Arc::new(values),
            node: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: Arc::new(vec![0.0; numel]),
            node: None,
            requires_grad: false,
        }
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            values: Arc::new(vec![1.0; numel]),
            node: None,
            requires_grad: false,
        }
    }

    /// A rank-0 scalar.
    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            values: Arc::new(vec![v]),
            node: None,
            requires_grad: false,
        }
    }

    /// Marks this tensor as a differentiable leaf. It still needs to be
    /// watched on a tape before gradients can reach it.
    pub fn with_grad(mut self) -> Tensor {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Same values, no tape node, no gradient flow.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the underlying buffer (copy-on-write if shared).
    pub fn values_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.values)
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Number of rows when viewed as 2-D (`[rows, cols]`).
    pub fn rows(&self) -> usize {
        match self.shape.as_slice() {
            [r, _] => *r,
            _ => panic!("rows() on tensor of shape {:?}", self.shape),
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.as_slice() {
            [_, c] => *c,
            _ => panic!("cols() on tensor of shape {:?}", self.shape),
        }
    }

    /// The single value of a scalar (or length-1) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.values.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Internal constructor for op results that already live on the tape.
    pub(crate) fn from_op(shape: Vec<usize>, values: Vec<f64>, node: Option<NodeId>) -> Tensor {
        Tensor::from_arc(shape, Arc::new(values), node)
    }

    pub(crate) fn from_arc(shape: Vec<usize>, values: Arc<Vec<f64>>, node: Option<NodeId>) -> Tensor {
        Tensor {
            shape,
            values,
            node,
            requires_grad: node.is_some(),
        }
    }

    pub(crate) fn with_node(&self, node: NodeId) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: Arc::clone(&self.values),
            node: Some(node),
            requires_grad: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn detach_keeps_values_and_drops_grad() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        let d = t.detach();
        assert_eq!(d.values(), t.values());
        assert!(!d.requires_grad());
        assert!(d.node().is_none());
        // idempotent
        let dd = d.detach();
        assert_eq!(dd.values(), d.values());
        assert!(!dd.requires_grad());
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(4.25);
        assert!(s.is_scalar());
        assert_eq!(s.item(), 4.25);
        assert_eq!(s.shape(), &[] as &[usize]);
    }
}
