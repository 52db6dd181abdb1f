//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine is a classic Wengert tape: forward operations append nodes to a
//! [`Tape`], and [`Tape::backward`] replays the tape in reverse to accumulate
//! gradients into a [`GradMap`]. The operator set is deliberately small — dense
//! affine layers, the usual elementwise ops, softmax-family losses, and a few
//! fused ops (convex combination, row normalization) that keep the backward
//! rules exact.
//!
//! Design constraints honored throughout:
//! - all arithmetic is `f64`, row-major, single-threaded per tape;
//! - a tensor without a tape node is a constant: gradients never flow into it;
//! - backward accumulation order is fixed, so two backward passes over the same
//!   tape produce bitwise-identical gradient maps.

mod check;
mod error;
mod ops;
mod tape;
mod tensor;

pub use check::finite_diff_check;
pub use error::{Error, Result};
pub use tape::{GradMap, NodeId, Tape};
pub use tensor::Tensor;
