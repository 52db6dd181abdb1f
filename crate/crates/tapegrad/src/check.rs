use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Central-difference gradient check against the tape's backward pass.
///
/// `f` builds a scalar loss from `x` on the given tape; it is evaluated once
/// analytically (with `x` watched) and `2·len(x)` times numerically (with
/// perturbed constants). Returns the maximum relative error over coordinates,
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
///
/// The numeric path never calls backward, so it stays independent of the
/// gradients it is checking.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &Tensor) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::Config {
            op: "finite_diff_check",
            detail: format!("step must be positive, got {eps}"),
        });
    }

    let tape = Tape::new();
    let mut leaf = x.detach();
    leaf.set_requires_grad(true);
    let watched = tape.watch(&leaf);
    let loss = f(&tape, &watched)?;
    if !loss.is_scalar() {
        return Err(Error::Usage(format!(
            "finite_diff_check expects a scalar-valued function, got shape {:?}",
            loss.shape()
        )));
    }
    if !loss.item().is_finite() {
        return Err(Error::NonFinite("finite_diff_check"));
    }
    let grads = tape.backward(&loss)?;
    let analytic: Vec<f64> = match grads.get(&watched) {
        Some(g) => g.to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |vals: Vec<f64>| -> Result<f64> {
        let t = Tape::new();
        let xt = Tensor::new(x.shape().to_vec(), vals)?;
        let out = f(&t, &xt)?;
        let v = out.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_diff_check"));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    let base = x.values();
    for i in 0..x.len() {
        let mut plus = base.to_vec();
        plus[i] += eps;
        let mut minus = base.to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic[i] - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let err = finite_diff_check(|t, x| Ok(t.sum(x)), &x, 1e-5).unwrap();
        assert!(err <= 1e-9, "err = {err}");
    }

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let err = finite_diff_check(|t, x| t.mul(x, x).map(|y| t.sum(&y)), &x, 1e-5).unwrap();
        assert!(err <= 1e-9, "err = {err}");
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(finite_diff_check(|t, x| Ok(t.sum(x)), &x, 0.0).is_err());
    }
}
