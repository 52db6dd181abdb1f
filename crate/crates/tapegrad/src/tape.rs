use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::kernels;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// One input of a recorded operation: the producing node (if any) plus a
/// snapshot of the forward values, shared with the tensor that carried them.
#[derive(Debug, Clone)]
pub(crate) struct Src {
    pub node: Option<NodeId>,
    pub vals: Arc<Vec<f64>>,
}

impl Src {
    pub fn of(t: &Tensor) -> Src {
        Src {
            node: t.node(),
            vals: t.values_arc(),
        }
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Matmul { a: Src, b: Src, m: usize, k: usize, n: usize },
    /// C = A · Bᵀ with A: [ra×d], B: [rb×d].
    MatmulNt { a: Src, b: Src, ra: usize, rb: usize, d: usize },
    Add { a: Src, b: Src },
    Sub { a: Src, b: Src },
    Mul { a: Src, b: Src },
    Scale { a: Src, c: f64 },
    Relu { a: Src },
    /// C[i,j] = A[i,j] + bias[j].
    AddBias { a: Src, bias: Src, rows: usize, cols: usize },
    Concat { a: Src, b: Src, rows: usize, cols_a: usize, cols_b: usize },
    Reshape { a: Src },
    Sum { a: Src },
    SumRows { a: Src, rows: usize, cols: usize },
    /// Saved output rows (softmax probabilities).
    Softmax { a: Src, out: Arc<Vec<f64>>, rows: usize, cols: usize },
    LogSoftmax { a: Src, out: Arc<Vec<f64>>, rows: usize, cols: usize },
    /// y[i] = A[i, idx[i]].
    SelectCols { a: Src, idx: Arc<Vec<usize>>, rows: usize, cols: usize },
    /// y[i,j] = w[i]·a[i,j] + (1−w[i])·b[i,j].
    ConvexCombine { a: Src, b: Src, w: Src, rows: usize, cols: usize },
    AbsPow { a: Src, p: f64 },
    /// Rows scaled to unit L2 norm; zero rows stay zero.
    L2NormalizeRows { a: Src, rows: usize, cols: usize },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
}

/// Append-only record of differentiable operations.
///
/// Node inputs always precede the node itself, so reverse iteration is a
/// topological backward order. A tape is confined to a single thread.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn push(&self, op: Op) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op });
        NodeId(nodes.len() - 1)
    }

    /// Registers `t` as a differentiable leaf and returns a handle tensor that
    /// shares its storage. Constants (requires_grad == false) pass through
    /// unchanged so frozen parameters never appear on the tape.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        if !t.requires_grad() {
            return t.detach();
        }
        let id = self.push(Op::Leaf);
        t.with_node(id)
    }

    /// Reverse-mode gradient accumulation from a scalar loss.
    pub fn backward(&self, loss: &Tensor) -> Result<GradMap> {
        if !loss.is_scalar() {
            return Err(Error::Usage(format!(
                "backward expects a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = loss
            .node()
            .ok_or_else(|| Error::Usage("backward on a constant loss (no tape node)".into()))?;

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            apply_vjp(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(GradMap { grads })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients keyed by tape node. A missing entry is an exactly-zero gradient:
/// nodes the loss never reached stay absent rather than materializing zeros.
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradMap {
    /// Gradient for a tensor, if the backward pass reached its node.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.get_node(t.node()?)
    }

    pub fn get_node(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0)?.as_deref()
    }

    pub fn contains(&self, t: &Tensor) -> bool {
        t.node().map(|id| self.get_node(id).is_some()).unwrap_or(false)
    }
}

fn add_into(acc: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = acc.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

/// Pushes the upstream gradient `g` of one node into its inputs.
fn apply_vjp(node: &Node, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            if let Some(ia) = a.node {
                // dA += G · Bᵀ
                add_into(&mut grads[ia.0], m * k, |da| {
                    kernels::matmul_nt_acc(g, &b.vals, m, n, k, da);
                });
            }
            if let Some(ib) = b.node {
                // dB += Aᵀ · G
                add_into(&mut grads[ib.0], k * n, |db| {
                    kernels::matmul_tn_acc(&a.vals, g, m, k, n, db);
                });
            }
        }
        Op::MatmulNt { a, b, ra, rb, d } => {
            let (ra, rb, d) = (*ra, *rb, *d);
            if let Some(ia) = a.node {
                // dA += G · B
                add_into(&mut grads[ia.0], ra * d, |da| {
                    kernels::matmul_acc(g, &b.vals, ra, rb, d, da);
                });
            }
            if let Some(ib) = b.node {
                // dB += Gᵀ · A
                add_into(&mut grads[ib.0], rb * d, |db| {
                    kernels::matmul_tn_acc(g, &a.vals, ra, rb, d, db);
                });
            }
        }
        Op::Add { a, b } => {
            for src in [a, b] {
                if let Some(i) = src.node {
                    add_into(&mut grads[i.0], g.len(), |d| {
                        for (dv, gv) in d.iter_mut().zip(g) {
                            *dv += gv;
                        }
                    });
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            if let Some(i) = b.node {
                add_into(&mut grads[i.0], g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv -= gv;
                    }
                });
            }
        }
        Op::Mul { a, b } => {
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], g.len(), |d| {
                    for ((dv, gv), bv) in d.iter_mut().zip(g).zip(b.vals.iter()) {
                        *dv += gv * bv;
                    }
                });
            }
            if let Some(i) = b.node {
                add_into(&mut grads[i.0], g.len(), |d| {
                    for ((dv, gv), av) in d.iter_mut().zip(g).zip(a.vals.iter()) {
                        *dv += gv * av;
                    }
                });
            }
        }
        Op::Scale { a, c } => {
            if let Some(i) = a.node {
                let c = *c;
                add_into(&mut grads[i.0], g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += c * gv;
                    }
                });
            }
        }
        Op::Relu { a } => {
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], g.len(), |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(a.vals.iter()) {
                        if *xv > 0.0 {
                            *dv += gv;
                        }
                    }
                });
            }
        }
        Op::AddBias { a, bias, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], rows * cols, |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
            if let Some(i) = bias.node {
                add_into(&mut grads[i.0], cols, |d| {
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for (dv, gv) in d.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                });
            }
        }
        Op::Concat { a, b, rows, cols_a, cols_b } => {
            let (rows, ca, cb) = (*rows, *cols_a, *cols_b);
            let cols = ca + cb;
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], rows * ca, |d| {
                    for r in 0..rows {
                        let grow = &g[r * cols..r * cols + ca];
                        let drow = &mut d[r * ca..(r + 1) * ca];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                });
            }
            if let Some(i) = b.node {
                add_into(&mut grads[i.0], rows * cb, |d| {
                    for r in 0..rows {
                        let grow = &g[r * cols + ca..(r + 1) * cols];
                        let drow = &mut d[r * cb..(r + 1) * cb];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                });
            }
        }
        Op::Reshape { a } => {
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], g.len(), |d| {
                    for (dv, gv) in d.iter_mut().zip(g) {
                        *dv += gv;
                    }
                });
            }
        }
        Op::Sum { a } => {
            if let Some(i) = a.node {
                let gs = g[0];
                add_into(&mut grads[i.0], a.vals.len(), |d| {
                    for dv in d.iter_mut() {
                        *dv += gs;
                    }
                });
            }
        }
        Op::SumRows { a, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], rows * cols, |d| {
                    for r in 0..rows {
                        let gr = g[r];
                        for dv in &mut d[r * cols..(r + 1) * cols] {
                            *dv += gr;
                        }
                    }
                });
            }
        }
        Op::Softmax { a, out, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], rows * cols, |d| {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        let drow = &mut d[r * cols..(r + 1) * cols];
                        for ((dv, yv), gv) in drow.iter_mut().zip(y).zip(gr) {
                            *dv += yv * (gv - dot);
                        }
                    }
                });
            }
        }
        Op::LogSoftmax { a, out, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], rows * cols, |d| {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        let drow = &mut d[r * cols..(r + 1) * cols];
                        for ((dv, yv), gv) in drow.iter_mut().zip(y).zip(gr) {
                            *dv += gv - yv.exp() * gsum;
                        }
                    }
                });
            }
        }
        Op::SelectCols { a, idx, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], rows * cols, |d| {
                    for r in 0..rows {
                        d[r * cols + idx[r]] += g[r];
                    }
                });
            }
        }
        Op::ConvexCombine { a, b, w, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], rows * cols, |d| {
                    for r in 0..rows {
                        let wr = w.vals[r];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let drow = &mut d[r * cols..(r + 1) * cols];
                        for (dv, gv) in drow.iter_mut().zip(gr) {
                            *dv += wr * gv;
                        }
                    }
                });
            }
            if let Some(i) = b.node {
                add_into(&mut grads[i.0], rows * cols, |d| {
                    for r in 0..rows {
                        let wr = 1.0 - w.vals[r];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let drow = &mut d[r * cols..(r + 1) * cols];
                        for (dv, gv) in drow.iter_mut().zip(gr) {
                            *dv += wr * gv;
                        }
                    }
                });
            }
            if let Some(i) = w.node {
                add_into(&mut grads[i.0], rows, |d| {
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let ar = &a.vals[r * cols..(r + 1) * cols];
                        let br = &b.vals[r * cols..(r + 1) * cols];
                        let mut acc = 0.0;
                        for ((gv, av), bv) in gr.iter().zip(ar).zip(br) {
                            acc += gv * (av - bv);
                        }
                        d[r] += acc;
                    }
                });
            }
        }
        Op::AbsPow { a, p } => {
            if let Some(i) = a.node {
                let p = *p;
                add_into(&mut grads[i.0], g.len(), |d| {
                    for ((dv, gv), xv) in d.iter_mut().zip(g).zip(a.vals.iter()) {
                        let x = *xv;
                        if x != 0.0 {
                            *dv += gv * p * x.abs().powf(p - 1.0) * x.signum();
                        }
                    }
                });
            }
        }
        Op::L2NormalizeRows { a, rows, cols } => {
            let (rows, cols) = (*rows, *cols);
            if let Some(i) = a.node {
                add_into(&mut grads[i.0], rows * cols, |d| {
                    for r in 0..rows {
                        let x = &a.vals[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let norm_sq: f64 = x.iter().map(|v| v * v).sum();
                        if norm_sq == 0.0 {
                            continue;
                        }
                        let norm = norm_sq.sqrt();
                        let dot: f64 = x.iter().zip(gr).map(|(xv, gv)| xv * gv).sum();
                        let inv = 1.0 / norm;
                        let coef = dot / (norm_sq * norm);
                        let drow = &mut d[r * cols..(r + 1) * cols];
                        for ((dv, gv), xv) in drow.iter_mut().zip(gr).zip(x) {
                            *dv += gv * inv - xv * coef;
                        }
                    }
                });
            }
        }
    }
}
