//! The routing policy: a single affine layer over concatenated final-block
//! features, producing two log-scores per spot, sampled with the
//! Gumbel-Softmax straight-through estimator.
//!
//! Forward decisions are hard one-hots (channel 0 = teacher). The value fed
//! downstream is `relaxed + detach(forward − relaxed)`, so its entries are
//! exactly 0/1 while its gradient is the relaxed gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::{Tape, Tensor};

use crate::error::{DistillError, Result};
use crate::network::NetworkSpec;
use crate::params::{Bound, ParamStore};

/// One affine layer mapping `[teacher_last ++ student_last]` to `(N+1)·2`
/// log-scores, reshaped to `[B, N+1, 2]`.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub params: ParamStore,
    pub in_dim: usize,
    pub spots: usize,
}

impl PolicyParams {
    pub fn build(teacher: &NetworkSpec, student: &NetworkSpec, seed: u64) -> PolicyParams {
        let n = teacher.block_count();
        let in_dim = teacher.block_width(n - 1) + student.block_width(n - 1);
        let spots = n + 1;
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        let bound = (6.0 / in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * spots * 2)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let mut params = ParamStore::new();
        params.push(
            "policy.weight",
            Tensor::new(vec![in_dim, spots * 2], w).expect("sized buffer"),
        );
        params.push("policy.bias", Tensor::zeros(vec![spots * 2]));
        PolicyParams {
            params,
            in_dim,
            spots,
        }
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn bind_const(&self) -> Bound {
        self.params.bind_const()
    }

    /// Log-scores `[B, N+1, 2]` from the two final-block features.
    pub fn logits(
        &self,
        tape: &Tape,
        bound: &Bound,
        feat_t_last: &Tensor,
        feat_s_last: &Tensor,
    ) -> Result<Tensor> {
        let ft = tape.concat_cols(feat_t_last, feat_s_last)?;
        if ft.cols() != self.in_dim {
            return Err(DistillError::Tape(tapegrad::Error::BadShape {
                op: "policy_logits",
                expected: format!("concatenated width {}", self.in_dim),
                found: ft.shape().to_vec(),
            }));
        }
        let h = tape.matmul(&ft, bound.get(0))?;
        let h = tape.add_bias(&h, bound.get(1))?;
        let b = ft.rows();
        Ok(tape.reshape(&h, vec![b, self.spots, 2])?)
    }
}

/// Standard Gumbel(0,1) noise: `−log(−log u)` with `u` clamped away from
/// {0, 1} by 1e-12.
pub fn sample_gumbel(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n)
        .map(|_| gumbel_from_uniform(rng.gen::<f64>()))
        .collect();
    Tensor::new(shape.to_vec(), vals).expect("sized buffer")
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(1e-12, 1.0 - 1e-12);
    -(-u.ln()).ln()
}

fn require_bs2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [b, s, 2] => Ok((*b, *s)),
        other => Err(DistillError::Tape(tapegrad::Error::BadShape {
            op,
            expected: "[batch, spots, 2] tensor".into(),
            found: other.to_vec(),
        })),
    }
}

/// Hard per-spot decision: one-hot over the two perturbed scores, ties broken
/// toward the teacher channel. Constant (not on any tape).
pub fn gumbel_forward(logits: &Tensor, noise: &Tensor) -> Result<Tensor> {
    let (b, s) = require_bs2("gumbel_forward", logits)?;
    if logits.shape() != noise.shape() {
        return Err(DistillError::Tape(tapegrad::Error::ShapeMismatch {
            op: "gumbel_forward",
            lhs: logits.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        }));
    }
    if !logits.all_finite() {
        return Err(DistillError::Tape(tapegrad::Error::NonFinite("gumbel_forward")));
    }
    let lv = logits.values();
    let nv = noise.values();
    let mut out = vec![0.0; b * s * 2];
    for i in 0..b * s {
        let t_score = lv[2 * i] + nv[2 * i];
        let s_score = lv[2 * i + 1] + nv[2 * i + 1];
        if t_score >= s_score {
            out[2 * i] = 1.0;
        } else {
            out[2 * i + 1] = 1.0;
        }
    }
    Ok(Tensor::new(vec![b, s, 2], out)?)
}

/// Relaxed decision: per-(sample, spot) 2-way softmax of the perturbed scores
/// divided by `tau`. Differentiable w.r.t. the logits.
pub fn gumbel_relaxed(tape: &Tape, logits: &Tensor, noise: &Tensor, tau: f64) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(DistillError::Config(format!(
            "gumbel temperature must be positive, got {tau}"
        )));
    }
    let (b, s) = require_bs2("gumbel_relaxed", logits)?;
    let flat = tape.reshape(logits, vec![b * s, 2])?;
    let noise_flat = Tensor::new(vec![b * s, 2], noise.values().to_vec())?;
    let perturbed = tape.add(&flat, &noise_flat)?;
    let scaled = tape.scale(&perturbed, 1.0 / tau);
    let soft = tape.softmax(&scaled)?;
    Ok(tape.reshape(&soft, vec![b, s, 2])?)
}

/// A per-batch routing decision over all N+1 spots.
///
/// `forward_w[b, i] == 1` means the teacher path is taken at spot i for sample
/// b. `relaxed_w` carries the gradient; `gate` is the straight-through value
/// actually consumed downstream (discrete forward, relaxed backward).
#[derive(Debug, Clone)]
pub struct RoutingDecision {
    pub forward_w: Tensor,
    pub relaxed_w: Tensor,
    pub gate: Tensor,
    pub tau: f64,
}

impl RoutingDecision {
    pub fn spots(&self) -> usize {
        self.forward_w.cols()
    }

    pub fn batch(&self) -> usize {
        self.forward_w.rows()
    }
}

/// Combines the hard and relaxed samples into a straight-through decision.
/// The same noise must feed both paths.
pub fn straight_through(
    tape: &Tape,
    logits: &Tensor,
    noise: &Tensor,
    tau: f64,
) -> Result<RoutingDecision> {
    let (b, s) = require_bs2("straight_through", logits)?;
    let one_hot = gumbel_forward(logits, noise)?;
    let relaxed = gumbel_relaxed(tape, logits, noise, tau)?;

    // Teacher channel only: w and 1−w fully describe a 2-way choice.
    let teacher_col = vec![0usize; b * s];
    let forward_flat = Tensor::new(vec![b * s, 2], one_hot.values().to_vec())?;
    let forward_w = tape.reshape(
        &tape.select_cols(&forward_flat, &teacher_col)?,
        vec![b, s],
    )?;
    let relaxed_flat = tape.reshape(&relaxed, vec![b * s, 2])?;
    let relaxed_w = tape.reshape(
        &tape.select_cols(&relaxed_flat, &teacher_col)?,
        vec![b, s],
    )?;

    let delta = tape.sub(&forward_w, &relaxed_w)?.detach();
    let gate = tape.add(&relaxed_w, &delta)?;

    Ok(RoutingDecision {
        forward_w: forward_w.detach(),
        relaxed_w,
        gate,
        tau,
    })
}

/// Exponentially decaying Gumbel temperature with a floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauSchedule {
    pub tau0: f64,
    pub tau_min: f64,
    pub decay: f64,
}

impl TauSchedule {
    /// Default schedule: starts at `tau0`, reaches `tau_min` at the final
    /// epoch of an `epochs`-long run.
    pub fn for_run(tau0: f64, tau_min: f64, epochs: usize) -> Result<TauSchedule> {
        if !(tau0 >= tau_min && tau_min > 0.0) {
            return Err(DistillError::Config(format!(
                "tau schedule requires tau0 ≥ tau_min > 0, got tau0={tau0}, tau_min={tau_min}"
            )));
        }
        let decay = if epochs <= 1 || tau0 == tau_min {
            1.0
        } else {
            (tau_min / tau0).powf(1.0 / (epochs as f64 - 1.0))
        };
        Ok(TauSchedule { tau0, tau_min, decay })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 >= self.tau_min && self.tau_min > 0.0) {
            return Err(DistillError::Config(format!(
                "tau schedule requires tau0 ≥ tau_min > 0, got {self:?}"
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(DistillError::Config(format!(
                "tau decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }

    pub fn tau_at(&self, epoch: usize) -> f64 {
        (self.tau0 * self.decay.powi(epoch as i32)).max(self.tau_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::BlockSpec;
    use rand::SeedableRng;

    fn specs() -> (NetworkSpec, NetworkSpec) {
        let teacher = NetworkSpec {
            input_dim: 3,
            blocks: vec![BlockSpec::relu_stack(&[6]), BlockSpec::relu_stack(&[6])],
            classifier_dim: 4,
        };
        let student = NetworkSpec {
            input_dim: 3,
            blocks: vec![BlockSpec::relu_stack(&[4]), BlockSpec::relu_stack(&[4])],
            classifier_dim: 4,
        };
        (teacher, student)
    }

    #[test]
    fn zero_policy_gives_uniform_relaxed_weights() {
        let (t, s) = specs();
        let mut policy = PolicyParams::build(&t, &s, 1);
        for i in 0..policy.params.len() {
            policy.params.get_mut(i).value.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = Tape::new();
        let bound = policy.bind(&tape);
        let ft = Tensor::zeros(vec![2, 6]);
        let fs = Tensor::zeros(vec![2, 4]);
        let logits = policy.logits(&tape, &bound, &ft, &fs).unwrap();
        assert!(logits.iter().all(|v| *v == 0.0));

        let noise = Tensor::zeros(vec![2, 3, 2]);
        let relaxed = gumbel_relaxed(&tape, &logits, &noise, 1.0).unwrap();
        assert!(relaxed.iter().all(|v| (*v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn batch_rows_are_independent() {
        let (t, s) = specs();
        let policy = PolicyParams::build(&t, &s, 3);
        let tape = Tape::new();
        let bound = policy.bind(&tape);

        let row_t: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
        let row_s: Vec<f64> = (0..4).map(|i| -0.2 * i as f64).collect();
        let single = policy
            .logits(
                &tape,
                &bound,
                &Tensor::new(vec![1, 6], row_t.clone()).unwrap(),
                &Tensor::new(vec![1, 4], row_s.clone()).unwrap(),
            )
            .unwrap();

        let mut big_t = row_t.clone();
        for _ in 0..3 {
            big_t.extend_from_slice(&row_t);
        }
        let mut big_s = row_s.clone();
        for _ in 0..3 {
            big_s.extend_from_slice(&row_s);
        }
        let batch = policy
            .logits(
                &tape,
                &bound,
                &Tensor::new(vec![4, 6], big_t).unwrap(),
                &Tensor::new(vec![4, 4], big_s).unwrap(),
            )
            .unwrap();
        assert_eq!(&batch.values()[..6], single.values());
    }

    #[test]
    fn gumbel_transform_fixed_point_and_mean() {
        assert!(gumbel_from_uniform(1.0 / std::f64::consts::E).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 1_000_000;
        let mean: f64 = (0..n)
            .map(|_| gumbel_from_uniform(rng.gen::<f64>()))
            .sum::<f64>()
            / n as f64;
        const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;
        assert!(
            (mean - EULER_MASCHERONI).abs() <= 0.01,
            "gumbel mean {mean} off γ"
        );
    }

    #[test]
    fn gumbel_noise_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let na = sample_gumbel(&[2, 3, 2], &mut a);
        let nb = sample_gumbel(&[2, 3, 2], &mut b);
        for (x, y) in na.iter().zip(nb.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn forward_argmax_and_tie_break() {
        // log-space scores: teacher 0.9, student 0.1 -> teacher chosen.
        let logits = Tensor::new(vec![1, 1, 2], vec![0.9f64.ln(), 0.1f64.ln()]).unwrap();
        let noise = Tensor::zeros(vec![1, 1, 2]);
        let oh = gumbel_forward(&logits, &noise).unwrap();
        assert_eq!(oh.values(), &[1.0, 0.0]);

        // exact tie -> teacher
        let logits = Tensor::new(vec![1, 1, 2], vec![0.3, 0.3]).unwrap();
        let oh = gumbel_forward(&logits, &noise).unwrap();
        assert_eq!(oh.values(), &[1.0, 0.0]);
    }

    #[test]
    fn forward_rows_are_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = sample_gumbel(&[5, 4, 2], &mut rng);
        let noise = sample_gumbel(&[5, 4, 2], &mut rng);
        let oh = gumbel_forward(&logits, &noise).unwrap();
        for i in 0..5 * 4 {
            let pair = &oh.values()[2 * i..2 * i + 2];
            assert_eq!(pair[0] + pair[1], 1.0);
            assert!(pair[0] == 0.0 || pair[0] == 1.0);
        }
    }

    #[test]
    fn relaxed_matches_logistic_oracle() {
        // gap δ at τ = 1 gives (σ(δ), 1−σ(δ)).
        let delta = 0.73;
        let tape = Tape::new();
        let logits = Tensor::new(vec![1, 1, 2], vec![delta, 0.0]).unwrap();
        let noise = Tensor::zeros(vec![1, 1, 2]);
        let relaxed = gumbel_relaxed(&tape, &logits, &noise, 1.0).unwrap();
        let sigma = 1.0 / (1.0 + (-delta).exp());
        assert!((relaxed.values()[0] - sigma).abs() < 1e-14);
        assert!((relaxed.values()[1] - (1.0 - sigma)).abs() < 1e-14);
    }

    #[test]
    fn relaxed_saturates_at_low_tau() {
        let tape = Tape::new();
        let logits = Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let noise = Tensor::zeros(vec![1, 1, 2]);
        let relaxed = gumbel_relaxed(&tape, &logits, &noise, 0.01).unwrap();
        assert!((relaxed.values()[0] - 1.0).abs() <= 1e-40);

        assert!(gumbel_relaxed(&tape, &logits, &noise, 0.0).is_err());
    }

    #[test]
    fn straight_through_is_discrete_forward_relaxed_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let tape = Tape::new();
        let raw = sample_gumbel(&[3, 4, 2], &mut rng).with_grad();
        let logits = tape.watch(&raw);
        let noise = sample_gumbel(&[3, 4, 2], &mut rng);

        let dec = straight_through(&tape, &logits, &noise, 1.3).unwrap();
        for v in dec.gate.iter() {
            assert!(*v == 0.0 || *v == 1.0);
        }
        for (g, f) in dec.gate.iter().zip(dec.forward_w.iter()) {
            assert_eq!(g.to_bits(), f.to_bits());
        }

        // gradient of sum(gate) == gradient of sum(relaxed_w), bitwise
        let loss_gate = tape.sum(&dec.gate);
        let g1 = tape.backward(&loss_gate).unwrap();
        let loss_relaxed = tape.sum(&dec.relaxed_w);
        let g2 = tape.backward(&loss_relaxed).unwrap();
        let (a, b) = (g1.get(&logits).unwrap(), g2.get(&logits).unwrap());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn frozen_noise_forward_invariant_relaxed_sharpens_with_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let logits = sample_gumbel(&[4, 3, 2], &mut rng);
        let noise = sample_gumbel(&[4, 3, 2], &mut rng);
        let tape = Tape::new();

        let mut prev: Option<Vec<f64>> = None;
        let mut first_forward: Option<Vec<f64>> = None;
        for tau in [5.0, 1.0, 0.1] {
            let dec = straight_through(&tape, &logits, &noise, tau).unwrap();
            match &first_forward {
                None => first_forward = Some(dec.forward_w.values().to_vec()),
                Some(f) => assert_eq!(f.as_slice(), dec.forward_w.values()),
            }
            // relaxed weight of the chosen channel grows monotonically as τ falls
            let chosen: Vec<f64> = dec
                .relaxed_w
                .iter()
                .zip(dec.forward_w.iter())
                .map(|(r, f)| if *f == 1.0 { *r } else { 1.0 - *r })
                .collect();
            if let Some(p) = prev {
                for (now, before) in chosen.iter().zip(&p) {
                    assert!(now >= before, "sharpening violated: {now} < {before}");
                }
            }
            prev = Some(chosen);
        }
    }

    #[test]
    fn tau_schedule_endpoints() {
        let s = TauSchedule::for_run(5.0, 0.5, 60).unwrap();
        assert_eq!(s.tau_at(0), 5.0);
        assert!((s.tau_at(59) - 0.5).abs() < 1e-12);
        assert_eq!(s.tau_at(100_000), 0.5);

        let flat = TauSchedule { tau0: 2.0, tau_min: 0.1, decay: 1.0 };
        assert_eq!(flat.tau_at(0), 2.0);
        assert_eq!(flat.tau_at(500), 2.0);

        assert!(TauSchedule::for_run(0.3, 0.5, 10).is_err());
    }
}
