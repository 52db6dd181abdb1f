use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{Op, Src, Tape};
use crate::tensor::Tensor;

/// Dense row-major kernels shared by forward and backward passes.
pub(crate) mod kernels {
    /// out += A·B, A: [m×k], B: [k×n].
    pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * n..(l + 1) * n];
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }

    /// out += A·Bᵀ, A: [m×k], B: [n×k].
    pub fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, ov) in orow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for (av, bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *ov += acc;
            }
        }
    }

    /// out += Aᵀ·B, A: [m×k], B: [m×n], out: [k×n].
    pub fn matmul_tn_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let orow = &mut out[l * n..(l + 1) * n];
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::BadShape {
            op,
            expected: "2-D tensor".into(),
            found: other.to_vec(),
        }),
    }
}

impl Tape {
    fn record1(&self, shape: Vec<usize>, values: Vec<f64>, a: &Tensor, op: impl FnOnce(Src) -> Op) -> Tensor {
        let node = if a.node().is_some() {
            Some(self.push(op(Src::of(a))))
        } else {
            None
        };
        Tensor::from_op(shape, values, node)
    }

    fn record2(
        &self,
        shape: Vec<usize>,
        values: Vec<f64>,
        a: &Tensor,
        b: &Tensor,
        op: impl FnOnce(Src, Src) -> Op,
    ) -> Tensor {
        let node = if a.node().is_some() || b.node().is_some() {
            Some(self.push(op(Src::of(a), Src::of(b))))
        } else {
            None
        };
        Tensor::from_op(shape, values, node)
    }

    /// Standard matrix product, `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = require_2d("matmul", a)?;
        let (kb, n) = require_2d("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(a.values(), b.values(), m, ka, n, &mut out);
        Ok(self.record2(vec![m, n], out, a, b, |sa, sb| Op::Matmul {
            a: sa,
            b: sb,
            m,
            k: ka,
            n,
        }))
    }

    /// `A · Bᵀ` for row-feature matrices of equal width.
    pub fn matmul_nt(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ra, da) = require_2d("matmul_nt", a)?;
        let (rb, db) = require_2d("matmul_nt", b)?;
        if da != db {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; ra * rb];
        kernels::matmul_nt_acc(a.values(), b.values(), ra, da, rb, &mut out);
        Ok(self.record2(vec![ra, rb], out, a, b, |sa, sb| Op::MatmulNt {
            a: sa,
            b: sb,
            ra,
            rb,
            d: da,
        }))
    }

    fn zip_shapes(&self, op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_shapes("add", a, b)?;
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x + y).collect();
        Ok(self.record2(a.shape().to_vec(), out, a, b, |sa, sb| Op::Add { a: sa, b: sb }))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_shapes("sub", a, b)?;
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        Ok(self.record2(a.shape().to_vec(), out, a, b, |sa, sb| Op::Sub { a: sa, b: sb }))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_shapes("mul", a, b)?;
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x * y).collect();
        Ok(self.record2(a.shape().to_vec(), out, a, b, |sa, sb| Op::Mul { a: sa, b: sb }))
    }

    pub fn scale(&self, a: &Tensor, c: f64) -> Tensor {
        let out: Vec<f64> = a.iter().map(|x| x * c).collect();
        self.record1(a.shape().to_vec(), out, a, |sa| Op::Scale { a: sa, c })
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        let out: Vec<f64> = a.iter().map(|x| x.max(0.0)).collect();
        self.record1(a.shape().to_vec(), out, a, |sa| Op::Relu { a: sa })
    }

    /// Adds a `[cols]` bias vector to every row of a `[rows×cols]` tensor.
    pub fn add_bias(&self, a: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = require_2d("add_bias", a)?;
        if bias.shape() != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: a.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        let bv = bias.values();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let arow = &a.values()[r * cols..(r + 1) * cols];
            out.extend(arow.iter().zip(bv).map(|(x, y)| x + y));
        }
        Ok(self.record2(vec![rows, cols], out, a, bias, |sa, sb| Op::AddBias {
            a: sa,
            bias: sb,
            rows,
            cols,
        }))
    }

    /// Column-wise concatenation of two batches with equal leading dimension.
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ra, ca) = require_2d("concat", a)?;
        let (rb, cb) = require_2d("concat", b)?;
        if ra != rb {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(&a.values()[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&b.values()[r * cb..(r + 1) * cb]);
        }
        Ok(self.record2(vec![ra, ca + cb], out, a, b, |sa, sb| Op::Concat {
            a: sa,
            b: sb,
            rows: ra,
            cols_a: ca,
            cols_b: cb,
        }))
    }

    pub fn reshape(&self, a: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.len() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: format!("{} elements", a.len()),
                found: shape,
            });
        }
        let out = a.values().to_vec();
        Ok(self.record1(shape, out, a, |sa| Op::Reshape { a: sa }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self, a: &Tensor) -> Tensor {
        let s: f64 = a.iter().sum();
        self.record1(vec![], vec![s], a, |sa| Op::Sum { a: sa })
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&self, a: &Tensor) -> Tensor {
        let n = a.len().max(1);
        let s = self.sum(a);
        self.scale(&s, 1.0 / n as f64)
    }

    /// Row sums of a 2-D tensor, `[rows×cols] -> [rows]`.
    pub fn sum_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = require_2d("sum_rows", a)?;
        let out: Vec<f64> = (0..rows)
            .map(|r| a.values()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        Ok(self.record1(vec![rows], out, a, |sa| Op::SumRows { a: sa, rows, cols }))
    }

    /// Row-stabilized softmax along axis 1.
    pub fn softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = require_2d("softmax", a)?;
        if !a.all_finite() {
            return Err(Error::NonFinite("softmax"));
        }
        let mut out = vec![0.0; rows * cols];
        softmax_rows(a.values(), rows, cols, &mut out);
        let out_arc = Arc::new(out);
        let node = a.node().map(|_| {
            self.push(
                Op::Softmax {
                    a: Src::of(a),
                    out: Arc::clone(&out_arc),
                    rows,
                    cols,
                },
            )
        });
        Ok(tensor_from_arc(vec![rows, cols], out_arc, node))
    }

    /// Row-stabilized log-softmax along axis 1.
    pub fn log_softmax(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = require_2d("log_softmax", a)?;
        if !a.all_finite() {
            return Err(Error::NonFinite("log_softmax"));
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &a.values()[r * cols..(r + 1) * cols];
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = v - max - lse;
            }
        }
        let out_arc = Arc::new(out);
        let node = a.node().map(|_| {
            self.push(
                Op::LogSoftmax {
                    a: Src::of(a),
                    out: Arc::clone(&out_arc),
                    rows,
                    cols,
                },
            )
        });
        Ok(tensor_from_arc(vec![rows, cols], out_arc, node))
    }

    /// Per-row column pick: `y[i] = a[i, idx[i]]`.
    pub fn select_cols(&self, a: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (rows, cols) = require_2d("select_cols", a)?;
        if idx.len() != rows {
            return Err(Error::Index {
                op: "select_cols",
                detail: format!("{} indices for {} rows", idx.len(), rows),
            });
        }
        for (r, &i) in idx.iter().enumerate() {
            if i >= cols {
                return Err(Error::Index {
                    op: "select_cols",
                    detail: format!("index {i} out of range [0, {cols}) at row {r}"),
                });
            }
        }
        let out: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| a.values()[r * cols + i])
            .collect();
        let idx_arc = Arc::new(idx.to_vec());
        Ok(self.record1(vec![rows], out, a, |sa| Op::SelectCols {
            a: sa,
            idx: idx_arc,
            rows,
            cols,
        }))
    }

    /// Mean over the batch of `−log_softmax(logits)[target]`.
    pub fn cross_entropy(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (rows, _) = require_2d("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::Index {
                op: "cross_entropy",
                detail: format!("{} targets for {} rows", targets.len(), rows),
            });
        }
        let logp = self.log_softmax(logits)?;
        let picked = self.select_cols(&logp, targets)?;
        let mean = self.mean(&picked);
        Ok(self.scale(&mean, -1.0))
    }

    /// Per-sample softened KL divergence `T² · KL(softmax(t/T) ‖ softmax(s/T))`.
    ///
    /// The teacher side is treated as a constant. Returned per sample so the
    /// caller can gate each sample before reducing. `t2_scaling` disables the
    /// T² compensation factor when false.
    pub fn kl_divergence(
        &self,
        student_logits: &Tensor,
        teacher_logits: &Tensor,
        temperature: f64,
        t2_scaling: bool,
    ) -> Result<Tensor> {
        if temperature <= 0.0 {
            return Err(Error::Config {
                op: "kl_divergence",
                detail: format!("temperature must be positive, got {temperature}"),
            });
        }
        self.zip_shapes("kl_divergence", student_logits, teacher_logits)?;
        let (rows, cols) = require_2d("kl_divergence", student_logits)?;

        // Teacher probabilities and entropy term, off-tape.
        let t = teacher_logits.detach();
        let mut p = vec![0.0; rows * cols];
        let scaled_t: Vec<f64> = t.iter().map(|v| v / temperature).collect();
        softmax_rows(&scaled_t, rows, cols, &mut p);
        let mut plogp = vec![0.0; rows];
        for r in 0..rows {
            plogp[r] = p[r * cols..(r + 1) * cols]
                .iter()
                .map(|&pv| if pv > 0.0 { pv * pv.ln() } else { 0.0 })
                .sum();
        }

        let s_scaled = self.scale(student_logits, 1.0 / temperature);
        let logq = self.log_softmax(&s_scaled)?;
        let p_const = Tensor::new(vec![rows, cols], p)?;
        let cross = self.mul(&logq, &p_const)?;
        let cross_rows = self.sum_rows(&cross)?; // Σ p·log q per sample
        let plogp_const = Tensor::new(vec![rows], plogp)?;
        let kl = self.sub(&plogp_const, &cross_rows)?;
        let factor = if t2_scaling { temperature * temperature } else { 1.0 };
        Ok(self.scale(&kl, factor))
    }

    /// Per-sample mixture `w·a + (1−w)·b` with `w` broadcast over columns.
    pub fn convex_combine(&self, a: &Tensor, b: &Tensor, w: &Tensor) -> Result<Tensor> {
        self.zip_shapes("convex_combine", a, b)?;
        let (rows, cols) = require_2d("convex_combine", a)?;
        if w.shape() != [rows] {
            return Err(Error::BadShape {
                op: "convex_combine",
                expected: format!("weight vector of shape [{rows}]"),
                found: w.shape().to_vec(),
            });
        }
        for &wv in w.iter() {
            if !(-1e-9..=1.0 + 1e-9).contains(&wv) {
                return Err(Error::Invariant {
                    op: "convex_combine",
                    detail: format!("weight {wv} outside [0, 1]"),
                });
            }
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let wr = w.values()[r];
            let ar = &a.values()[r * cols..(r + 1) * cols];
            let br = &b.values()[r * cols..(r + 1) * cols];
            out.extend(ar.iter().zip(br).map(|(av, bv)| wr * av + (1.0 - wr) * bv));
        }
        let node = if a.node().is_some() || b.node().is_some() || w.node().is_some() {
            Some(self.push(
                Op::ConvexCombine {
                    a: Src::of(a),
                    b: Src::of(b),
                    w: Src::of(w),
                    rows,
                    cols,
                },
            ))
        } else {
            None
        };
        Ok(Tensor::from_op(vec![rows, cols], out, node))
    }

    /// Elementwise `|x|^p` for `p ≥ 1`.
    pub fn abs_pow(&self, a: &Tensor, p: f64) -> Result<Tensor> {
        if p < 1.0 {
            return Err(Error::Config {
                op: "abs_pow",
                detail: format!("exponent must be ≥ 1, got {p}"),
            });
        }
        let out: Vec<f64> = a.iter().map(|x| x.abs().powf(p)).collect();
        Ok(self.record1(a.shape().to_vec(), out, a, |sa| Op::AbsPow { a: sa, p }))
    }

    /// Scales each row to unit L2 norm; all-zero rows map to the zero vector.
    pub fn l2_normalize_rows(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = require_2d("l2_normalize_rows", a)?;
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &a.values()[r * cols..(r + 1) * cols];
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                    *o = v / norm;
                }
            }
        }
        Ok(self.record1(vec![rows, cols], out, a, |sa| Op::L2NormalizeRows {
            a: sa,
            rows,
            cols,
        }))
    }
}

fn tensor_from_arc(shape: Vec<usize>, values: Arc<Vec<f64>>, node: Option<crate::tape::NodeId>) -> Tensor {
    Tensor::from_arc(shape, values, node)
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out[r * cols..(r + 1) * cols].iter_mut() {
            *o /= sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let tape = Tape::new();
        let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(&eye, &m).unwrap();
        assert_eq!(out.values(), m.values());

        let proj = t2(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = t2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let out = tape.matmul(&proj, &b).unwrap();
        assert_eq!(out.values(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_dim_mismatch() {
        let tape = Tape::new();
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 3, &[0.0; 6]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "error should name both shapes: {msg}");
    }

    #[test]
    fn elementwise_basics() {
        let tape = Tape::new();
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(tape.relu(&x).values(), &[0.0, 0.0, 2.0]);

        let z = Tensor::zeros(vec![3]);
        assert_eq!(tape.add(&x, &z).unwrap().values(), x.values());

        let y = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert_eq!(tape.scale(&y, 3.0).values(), &[3.0, 6.0]);

        assert!(tape.add(&x, &y).is_err());
    }

    #[test]
    fn concat_with_empty_operand() {
        let tape = Tape::new();
        let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let empty = t2(2, 0, &[]);
        let out = tape.concat_cols(&a, &empty).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.values(), a.values());

        let b = t2(2, 1, &[3.0, 4.0]);
        let c = t2(2, 1, &[1.0, 2.0]);
        let out = tape.concat_cols(&c, &b).unwrap();
        assert_eq!(out.values(), &[1.0, 3.0, 2.0, 4.0]);

        let bad = t2(3, 1, &[0.0; 3]);
        assert!(tape.concat_cols(&a, &bad).is_err());
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let tape = Tape::new();
        let x = t2(1, 3, &[0.0, 0.0, 0.0]);
        let s = tape.softmax(&x).unwrap();
        for v in s.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = t2(2, 4, &[0.3, -1.0, 2.5, 0.0, 7.0, 7.5, 6.0, 8.0]);
        let shifted_vals: Vec<f64> = x.iter().map(|v| v + 123.456).collect();
        let shifted = t2(2, 4, &shifted_vals);
        let a = tape.softmax(&x).unwrap();
        let b = tape.softmax(&shifted).unwrap();
        for (av, bv) in a.iter().zip(b.iter()) {
            assert!((av - bv).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_softmax_against_direct_summation() {
        // Oracle: log p_i = x_i − ln Σ exp(x_j), summed directly.
        let tape = Tape::new();
        let x = t2(1, 2, &[0.0, 3.0f64.ln()]);
        let lp = tape.log_softmax(&x).unwrap();
        assert!((lp.values()[0] - (-(4.0f64.ln()))).abs() < 1e-12);
        assert!((lp.values()[1] - (3.0f64 / 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::new();
        let x = t2(1, 2, &[f64::NAN, 0.0]);
        assert!(matches!(tape.softmax(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::new();
        // Saturated correct logit: loss collapses toward zero.
        let x = t2(1, 2, &[100.0, 0.0]);
        let ce = tape.cross_entropy(&x, &[0]).unwrap();
        assert!(ce.item() <= 1e-40, "ce = {}", ce.item());

        // Uniform logits over 10 classes: ln 10.
        let x = t2(1, 10, &[0.0; 10]);
        let ce = tape.cross_entropy(&x, &[3]).unwrap();
        assert!((ce.item() - 10.0f64.ln()).abs() < 1e-12);

        // Mean invariance for duplicated rows.
        let row = [0.2, 1.7, -0.4];
        let single = tape.cross_entropy(&t2(1, 3, &row), &[1]).unwrap();
        let mut two = row.to_vec();
        two.extend_from_slice(&row);
        let double = tape.cross_entropy(&t2(2, 3, &two), &[1, 1]).unwrap();
        assert!((single.item() - double.item()).abs() < 1e-15);

        assert!(tape.cross_entropy(&t2(1, 3, &row), &[3]).is_err());
    }

    #[test]
    fn kl_divergence_values() {
        let tape = Tape::new();
        let s = t2(2, 3, &[0.5, -0.2, 1.0, 2.0, 2.0, 2.0]);
        let kl = tape.kl_divergence(&s, &s, 4.0, true).unwrap();
        for v in kl.iter() {
            assert!(v.abs() < 1e-12, "identical logits should give zero, got {v}");
        }

        // Teacher concentrated on class 0, student uniform, T = 1: KL = ln 2.
        let teacher = t2(1, 2, &[200.0, 0.0]);
        let student = t2(1, 2, &[0.0, 0.0]);
        let kl = tape.kl_divergence(&student, &teacher, 1.0, true).unwrap();
        assert!((kl.item() - 2.0f64.ln()).abs() < 1e-12);

        assert!(tape.kl_divergence(&student, &teacher, 0.0, true).is_err());
        assert!(tape.kl_divergence(&student, &teacher, -1.0, true).is_err());
    }

    #[test]
    fn kl_divergence_matches_direct_summation_oracle_across_temperatures() {
        // Oracle: softmax both sides at T, then Σ p (ln p − ln q), scaled by T².
        let oracle = |s: &[f64], t: &[f64], temp: f64| -> f64 {
            let soft = |x: &[f64]| {
                let y: Vec<f64> = x.iter().map(|v| v / temp).collect();
                let m = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect::<Vec<f64>>()
            };
            let p = soft(t);
            let q = soft(s);
            temp * temp
                * p.iter()
                    .zip(&q)
                    .map(|(pv, qv)| if *pv > 0.0 { pv * (pv.ln() - qv.ln()) } else { 0.0 })
                    .sum::<f64>()
        };

        let tape = Tape::new();
        let s = [0.4, -1.1, 0.9, 2.2];
        let t = [1.5, 0.3, -0.7, 0.0];
        for temp in [1.0, 2.0, 4.0, 8.0] {
            let kl = tape
                .kl_divergence(&t2(1, 4, &s), &t2(1, 4, &t), temp, true)
                .unwrap();
            let want = oracle(&s, &t, temp);
            assert!(
                (kl.item() - want).abs() <= 1e-10,
                "T = {temp}: {} vs oracle {want}",
                kl.item()
            );
        }
    }

    #[test]
    fn convex_combine_endpoints() {
        let tape = Tape::new();
        let a = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t2(2, 3, &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0]);
        let ones = Tensor::ones(vec![2]);
        let zeros = Tensor::zeros(vec![2]);
        assert_eq!(tape.convex_combine(&a, &b, &ones).unwrap().values(), a.values());
        assert_eq!(tape.convex_combine(&a, &b, &zeros).unwrap().values(), b.values());

        let half = Tensor::new(vec![2], vec![0.5, 0.25]).unwrap();
        let same = tape.convex_combine(&a, &a, &half).unwrap();
        assert_eq!(same.values(), a.values());

        let bad = Tensor::new(vec![2], vec![1.5, 0.0]).unwrap();
        assert!(matches!(
            tape.convex_combine(&a, &b, &bad),
            Err(Error::Invariant { .. })
        ));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let tape = Tape::new();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        let xw = tape.watch(&x);
        let loss = tape.sum(&xw);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&xw).unwrap(), &[1.0, 1.0, 1.0]);

        let tape = Tape::new();
        let x = Tensor::new(vec![1], vec![3.0]).unwrap().with_grad();
        let xw = tape.watch(&x);
        let sq = tape.mul(&xw, &xw).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&xw).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let xw = tape.watch(&x);
        assert!(tape.backward(&xw).is_err());
    }

    #[test]
    fn detach_severs_gradient_flow() {
        let tape = Tape::new();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let xw = tape.watch(&x);
        let d = xw.detach();
        assert_eq!(d.values(), xw.values());
        let y = tape.mul(&d, &d); // constant path
        assert!(y.as_ref().map(|t| t.node().is_none()).unwrap_or(false));

        // Composite: loss = sum(xw · detach(xw)); only the live side gets grads.
        let prod = tape.mul(&xw, &d).unwrap();
        let loss = tape.sum(&prod);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&xw).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_gradient_splits() {
        let tape = Tape::new();
        let a = t2(2, 2, &[1.0; 4]).with_grad();
        let b = t2(2, 1, &[1.0; 2]).with_grad();
        let (aw, bw) = (tape.watch(&a), tape.watch(&b));
        let cat = tape.concat_cols(&aw, &bw).unwrap();
        let loss = tape.sum(&cat);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&aw).unwrap(), &[1.0; 4]);
        assert_eq!(grads.get(&bw).unwrap(), &[1.0; 2]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let tape = Tape::new();
        let x = t2(3, 3, &[0.3, -0.8, 1.2, 0.0, 2.0, -1.5, 0.4, 0.9, -0.2]).with_grad();
        let xw = tape.watch(&x);
        let sm = tape.softmax(&xw).unwrap();
        let picked = tape.select_cols(&sm, &[0, 2, 1]).unwrap();
        let loss = tape.sum(&picked);
        let g1 = tape.backward(&loss).unwrap();
        let g2 = tape.backward(&loss).unwrap();
        let (a, b) = (g1.get(&xw).unwrap(), g2.get(&xw).unwrap());
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
