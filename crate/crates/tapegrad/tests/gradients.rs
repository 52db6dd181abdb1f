//! Finite-difference validation of every differentiable operation, plus the
//! tape-level invariants (determinism, detach, softmax normalization).

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapegrad::{finite_diff_check, Tape, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape, vals).unwrap()
}

/// Runs one finite-difference check and asserts it is within tolerance.
fn check<F>(name: &str, f: F, x: &Tensor, tol: f64)
where
    F: Fn(&Tape, &Tensor) -> tapegrad::Result<Tensor>,
{
    let err = finite_diff_check(&f, x, EPS).unwrap();
    assert!(err <= tol, "{name}: max relative error {err} > {tol}");
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..15 {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let b2 = b.clone();
        check(
            "matmul lhs",
            move |t, x| {
                let y = t.matmul(x, &b2)?;
                Ok(t.sum(&y))
            },
            &a,
            1e-6,
        );
        let a2 = a.clone();
        check(
            "matmul rhs",
            move |t, x| {
                let y = t.matmul(&a2, x)?;
                Ok(t.sum(&y))
            },
            &b,
            1e-6,
        );
    }
}

#[test]
fn matmul_nt_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..10 {
        let a = rand_tensor(&mut rng, vec![3, 5]);
        let b = rand_tensor(&mut rng, vec![4, 5]);
        let b2 = b.clone();
        check(
            "matmul_nt lhs",
            move |t, x| {
                let y = t.matmul_nt(x, &b2)?;
                let sq = t.mul(&y, &y)?;
                Ok(t.sum(&sq))
            },
            &a,
            TOL,
        );
        let a2 = a.clone();
        check(
            "matmul_nt rhs",
            move |t, x| {
                let y = t.matmul_nt(&a2, x)?;
                let sq = t.mul(&y, &y)?;
                Ok(t.sum(&sq))
            },
            &b,
            TOL,
        );
    }
}

#[test]
fn elementwise_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..15 {
        let x = rand_tensor(&mut rng, vec![2, 6]);
        let other = rand_tensor(&mut rng, vec![2, 6]);

        let o = other.clone();
        check("add", move |t, x| t.add(x, &o).map(|y| t.sum(&y)), &x, 1e-7);
        let o = other.clone();
        check("sub", move |t, x| t.sub(&o, x).map(|y| t.sum(&y)), &x, 1e-7);
        let o = other.clone();
        check("mul", move |t, x| t.mul(x, &o).map(|y| t.sum(&y)), &x, 1e-6);
        check("scale", |t, x| Ok(t.sum(&t.scale(x, -2.5))), &x, 1e-7);
        check(
            "relu",
            |t, x| {
                let y = t.relu(x);
                let sq = t.mul(&y, &y)?;
                Ok(t.sum(&sq))
            },
            &x,
            TOL,
        );
        check("abs_pow", |t, x| t.abs_pow(x, 2.0).map(|y| t.sum(&y)), &x, TOL);
    }
}

#[test]
fn bias_concat_reshape_select_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let x = rand_tensor(&mut rng, vec![3, 4]);
        let bias = rand_tensor(&mut rng, vec![4]);
        let b2 = bias.clone();
        check(
            "add_bias input",
            move |t, x| t.add_bias(x, &b2).map(|y| t.sum(&y)),
            &x,
            1e-7,
        );
        let x2 = x.clone();
        check(
            "add_bias bias",
            move |t, b| {
                let y = t.add_bias(&x2, b)?;
                let sq = t.mul(&y, &y)?;
                Ok(t.sum(&sq))
            },
            &bias,
            TOL,
        );

        let other = rand_tensor(&mut rng, vec![3, 2]);
        check(
            "concat",
            move |t, x| {
                let y = t.concat_cols(x, &other)?;
                let sq = t.mul(&y, &y)?;
                Ok(t.sum(&sq))
            },
            &x,
            TOL,
        );

        check(
            "reshape+select",
            |t, x| {
                let r = t.reshape(x, vec![4, 3])?;
                let picked = t.select_cols(&r, &[0, 2, 1, 0])?;
                let sq = t.mul(&picked, &picked)?;
                Ok(t.sum(&sq))
            },
            &x,
            TOL,
        );

        check("sum_rows", |t, x| {
            let s = t.sum_rows(x)?;
            let sq = t.mul(&s, &s)?;
            Ok(t.sum(&sq))
        }, &x, TOL);

        check("mean", |t, x| Ok(t.mean(x)), &x, 1e-6);
    }
}

#[test]
fn softmax_family_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..15 {
        let x = rand_tensor(&mut rng, vec![3, 5]);
        let weights = rand_tensor(&mut rng, vec![3, 5]);
        let w2 = weights.clone();
        check(
            "softmax",
            move |t, x| {
                let y = t.softmax(x)?;
                let wy = t.mul(&y, &w2)?;
                Ok(t.sum(&wy))
            },
            &x,
            TOL,
        );
        let w2 = weights.clone();
        check(
            "log_softmax",
            move |t, x| {
                let y = t.log_softmax(x)?;
                let wy = t.mul(&y, &w2)?;
                Ok(t.sum(&wy))
            },
            &x,
            TOL,
        );
        check("cross_entropy", |t, x| t.cross_entropy(x, &[1, 0, 4]), &x, TOL);

        let teacher = rand_tensor(&mut rng, vec![3, 5]);
        check(
            "kl_divergence",
            move |t, x| {
                let kl = t.kl_divergence(x, &teacher, 4.0, true)?;
                Ok(t.mean(&kl))
            },
            &x,
            TOL,
        );
    }
}

#[test]
fn fused_op_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..10 {
        let a = rand_tensor(&mut rng, vec![4, 3]);
        let b = rand_tensor(&mut rng, vec![4, 3]);
        let wv: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..0.95)).collect();
        let w = Tensor::new(vec![4], wv).unwrap();

        let (b2, w2) = (b.clone(), w.clone());
        check(
            "convex_combine a",
            move |t, x| {
                let y = t.convex_combine(x, &b2, &w2)?;
                let sq = t.mul(&y, &y)?;
                Ok(t.sum(&sq))
            },
            &a,
            TOL,
        );
        let (a2, b2) = (a.clone(), b.clone());
        check(
            "convex_combine w",
            move |t, w| {
                let y = t.convex_combine(&a2, &b2, w)?;
                let sq = t.mul(&y, &y)?;
                Ok(t.sum(&sq))
            },
            &w,
            TOL,
        );

        check(
            "l2_normalize_rows",
            |t, x| {
                let y = t.l2_normalize_rows(x)?;
                let picked = t.select_cols(&y, &[0, 1, 2, 0])?;
                let sq = t.mul(&picked, &picked)?;
                Ok(t.sum(&sq))
            },
            &a,
            TOL,
        );
    }
}

#[test]
fn two_block_mlp_end_to_end_gradcheck() {
    // Parameters of a 2-block ReLU MLP checked jointly through cross-entropy.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rand_tensor(&mut rng, vec![4, 3]);
    let w1 = rand_tensor(&mut rng, vec![3, 5]);
    let b1 = rand_tensor(&mut rng, vec![5]);
    let w2 = rand_tensor(&mut rng, vec![5, 4]);
    let b2 = rand_tensor(&mut rng, vec![4]);
    let targets = [0usize, 3, 1, 2];

    let forward = |t: &Tape,
                   x: &Tensor,
                   w1: &Tensor,
                   b1: &Tensor,
                   w2: &Tensor,
                   b2: &Tensor|
     -> tapegrad::Result<Tensor> {
        let h = t.matmul(x, w1)?;
        let h = t.add_bias(&h, b1)?;
        let h = t.relu(&h);
        let logits = t.matmul(&h, w2)?;
        let logits = t.add_bias(&logits, b2)?;
        t.cross_entropy(&logits, &targets)
    };

    // Check each parameter tensor with the others held constant.
    let (xa, w1a, b1a, w2a, b2a) = (x.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone());
    check(
        "mlp w1",
        move |t, p| forward(t, &xa, p, &b1a, &w2a, &b2a),
        &w1,
        TOL,
    );
    let (xa, w1a, b1a, w2a, b2a) = (x.clone(), w1.clone(), b1.clone(), w2.clone(), b2.clone());
    check(
        "mlp w2",
        move |t, p| forward(t, &xa, &w1a, &b1a, p, &b2a),
        &w2,
        TOL,
    );
    let (xa, w1a, w2a, b2a) = (x.clone(), w1.clone(), w2.clone(), b2.clone());
    check(
        "mlp b1",
        move |t, p| forward(t, &xa, &w1a, p, &w2a, &b2a),
        &b1,
        TOL,
    );
    let (xa, w1a, b1a, w2a) = (x, w1.clone(), b1, w2.clone());
    check(
        "mlp b2",
        move |t, p| forward(t, &xa, &w1a, &b1a, &w2a, p),
        &b2,
        TOL,
    );
}

#[test]
fn detach_yields_empty_gradient_entry() {
    let tape = Tape::new();
    let x = Tensor::new(vec![2], vec![1.5, -0.5]).unwrap().with_grad();
    let xw = tape.watch(&x);
    let d = xw.detach();
    let y = tape.mul(&d, &d);
    assert!(y.unwrap().node().is_none());

    // A second live tensor keeps the tape non-trivial.
    let z = Tensor::new(vec![2], vec![2.0, 3.0]).unwrap().with_grad();
    let zw = tape.watch(&z);
    let prod = tape.mul(&zw, &d).unwrap();
    let loss = tape.sum(&prod);
    let grads = tape.backward(&loss).unwrap();
    assert!(grads.get(&zw).is_some());
    assert!(!grads.contains(&xw), "detached source must stay absent");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new();
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let s = tape.softmax(&x).unwrap();
        for r in 0..3 {
            let sum: f64 = s.values()[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax(vals in proptest::collection::vec(-30.0f64..30.0, 8)) {
        let tape = Tape::new();
        let x = Tensor::new(vec![2, 4], vals).unwrap();
        let s = tape.softmax(&x).unwrap();
        let ls = tape.log_softmax(&x).unwrap();
        for (a, b) in s.iter().zip(ls.iter()) {
            prop_assert!((a.ln() - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn convex_combine_stays_between_inputs(
        avals in proptest::collection::vec(-5.0f64..5.0, 6),
        bvals in proptest::collection::vec(-5.0f64..5.0, 6),
        w0 in 0.0f64..1.0,
        w1 in 0.0f64..1.0,
    ) {
        let tape = Tape::new();
        let a = Tensor::new(vec![2, 3], avals).unwrap();
        let b = Tensor::new(vec![2, 3], bvals).unwrap();
        let w = Tensor::new(vec![2], vec![w0, w1]).unwrap();
        let y = tape.convex_combine(&a, &b, &w).unwrap();
        for ((yv, av), bv) in y.iter().zip(a.iter()).zip(b.iter()) {
            let (lo, hi) = if av <= bv { (av, bv) } else { (bv, av) };
            prop_assert!(*yv >= lo - 1e-12 && *yv <= hi + 1e-12);
        }
    }
}
