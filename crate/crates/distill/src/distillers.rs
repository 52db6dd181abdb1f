//! Pluggable "what to distill" losses, gated per sample and per spot by the
//! detached routing decision.
//!
//! Four distillers ship: softened-KL on the logits, feature hints, attention
//! transfer and similarity preserving. Per-sample losses are gated sample by
//! sample; batch-level losses (SP) are scaled by the batch mean of their gate
//! column, which preserves the expected gating signal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::{Tape, Tensor};

use crate::error::{DistillError, Result};
use crate::network::{FeatureBundle, NetworkSpec};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillerKind {
    /// Softened KL divergence at the logit spot.
    KdKl,
    /// Feature hints: squared distance to (projected) teacher features.
    Fitnets,
    /// Attention transfer over normalized magnitude vectors.
    At,
    /// Similarity preserving: pairwise-similarity Gram matching (batch-level).
    Sp,
}

impl DistillerKind {
    /// Whether the intermediate loss yields one value per sample.
    pub fn per_sample(&self) -> bool {
        match self {
            DistillerKind::KdKl | DistillerKind::Fitnets | DistillerKind::At => true,
            DistillerKind::Sp => false,
        }
    }

    /// Default distillation-loss factor β₂ for this distiller.
    pub fn default_beta2(&self) -> f64 {
        match self {
            DistillerKind::KdKl => 1.0,
            DistillerKind::Fitnets => 1.0,
            DistillerKind::At => 1000.0,
            DistillerKind::Sp => 3000.0,
        }
    }
}

/// Which spots a distiller touches: a subset of the intermediate spots 1..=N
/// plus the always-available logit spot N+1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpotSet {
    pub intermediate: Vec<usize>,
    pub logit_spot: bool,
}

impl SpotSet {
    /// Conventional spot placement per distiller for an N-block network.
    pub fn defaults(kind: DistillerKind, n: usize) -> SpotSet {
        let intermediate = match kind {
            DistillerKind::KdKl => vec![],
            DistillerKind::Fitnets => vec![3.min(n)],
            DistillerKind::At => (2..n).collect(),
            DistillerKind::Sp => vec![n.saturating_sub(1).max(1)],
        };
        SpotSet {
            intermediate,
            logit_spot: true,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut bad: Vec<usize> = self
            .intermediate
            .iter()
            .copied()
            .filter(|&s| s == 0 || s > n)
            .collect();
        bad.dedup();
        if !bad.is_empty() {
            return Err(DistillError::Config(format!(
                "distillation spots {bad:?} outside valid range 1..={n}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub kind: DistillerKind,
    pub spots: SpotSet,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    /// Softening temperature for the KL term.
    pub temperature: f64,
    /// Magnitude exponent for attention transfer.
    pub at_power: f64,
    /// Whether the KL term carries the T² compensation factor.
    pub kl_t2_scaling: bool,
}

impl DistillConfig {
    pub fn for_kind(kind: DistillerKind, n: usize) -> DistillConfig {
        DistillConfig {
            kind,
            spots: SpotSet::defaults(kind, n),
            beta1: 1.0,
            beta2: kind.default_beta2(),
            beta3: 1.0,
            temperature: 4.0,
            at_power: 2.0,
            kl_t2_scaling: true,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut problems = Vec::new();
        if self.beta1 < 0.0 || self.beta2 < 0.0 || self.beta3 < 0.0 {
            problems.push(format!(
                "loss factors must be non-negative (beta1={}, beta2={}, beta3={})",
                self.beta1, self.beta2, self.beta3
            ));
        }
        if self.temperature <= 0.0 {
            problems.push(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.at_power < 1.0 {
            problems.push(format!("at_power must be ≥ 1, got {}", self.at_power));
        }
        if self.kind == DistillerKind::KdKl && !self.spots.intermediate.is_empty() {
            problems.push("kd_kl distills only at the logit spot; intermediate spots must be empty".into());
        }
        if let Err(e) = self.spots.validate(n) {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DistillError::Config(problems.join("; ")))
        }
    }
}

/// Per-spot affine maps lifting student features to teacher width for the
/// hint loss. They exist only at fitnets spots whose widths differ, and they
/// train with the student optimizer group.
#[derive(Debug, Clone)]
pub struct HintProjections {
    pub params: ParamStore,
    // spot (1-based) -> (weight_idx, bias_idx)
    slots: Vec<(usize, Option<(usize, usize)>)>,
}

impl HintProjections {
    pub fn build(
        cfg: &DistillConfig,
        teacher: &NetworkSpec,
        student: &NetworkSpec,
        seed: u64,
    ) -> Result<HintProjections> {
        let mut params = ParamStore::new();
        let mut slots = Vec::new();
        if cfg.kind == DistillerKind::Fitnets {
            let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
            for &spot in &cfg.spots.intermediate {
                let sw = student.block_width(spot - 1);
                let tw = teacher.block_width(spot - 1);
                if sw == tw {
                    slots.push((spot, None));
                    continue;
                }
                let bound = (6.0 / sw as f64).sqrt();
                let vals: Vec<f64> = (0..sw * tw).map(|_| rng.gen_range(-bound..bound)).collect();
                let w = params.push(
                    format!("hint.spot{spot}.weight"),
                    Tensor::new(vec![sw, tw], vals).expect("sized buffer"),
                );
                let b = params.push(format!("hint.spot{spot}.bias"), Tensor::zeros(vec![tw]));
                slots.push((spot, Some((w, b))));
            }
        }
        Ok(HintProjections { params, slots })
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn bind_const(&self) -> Bound {
        self.params.bind_const()
    }

    /// `None`: spot unknown. `Some(None)`: spot exists with matched widths.
    /// `Some(Some((w, b)))`: store indices of the projection map.
    pub fn projection(&self, spot: usize) -> Option<Option<(usize, usize)>> {
        self.slots.iter().find(|(s, _)| *s == spot).map(|(_, p)| *p)
    }
}

/// Per-sample hint loss `‖proj(f_s) − f_t‖² / d_t` with the teacher side
/// constant.
pub fn fitnets_hint(
    tape: &Tape,
    f_s: &Tensor,
    f_t: &Tensor,
    proj: Option<(&Tensor, &Tensor)>,
) -> Result<Tensor> {
    let f_t = f_t.detach();
    let projected = match proj {
        Some((w, b)) => {
            let h = tape.matmul(f_s, w)?;
            tape.add_bias(&h, b)?
        }
        None => {
            if f_s.cols() != f_t.cols() {
                return Err(DistillError::Config(format!(
                    "fitnets spot with widths {} vs {} needs a hint projection",
                    f_s.cols(),
                    f_t.cols()
                )));
            }
            f_s.clone()
        }
    };
    let d_t = f_t.cols();
    let diff = tape.sub(&projected, &f_t)?;
    let sq = tape.mul(&diff, &diff)?;
    let per_sample = tape.sum_rows(&sq)?;
    Ok(tape.scale(&per_sample, 1.0 / d_t as f64))
}

/// Per-sample attention-transfer loss `‖a(f_s) − a(f_t)‖²` with
/// `a(f) = |f|^p / ‖|f|^p‖₂` and the teacher side constant.
pub fn attention_transfer(tape: &Tape, f_s: &Tensor, f_t: &Tensor, p: f64) -> Result<Tensor> {
    let f_t = f_t.detach();
    let a_s = tape.l2_normalize_rows(&tape.abs_pow(f_s, p)?)?;
    let a_t = tape.l2_normalize_rows(&tape.abs_pow(&f_t, p)?)?;
    let diff = tape.sub(&a_s, &a_t)?;
    let sq = tape.mul(&diff, &diff)?;
    Ok(tape.sum_rows(&sq)?)
}

/// Batch-level similarity-preserving loss `‖G_s − G_t‖²_F / B²` with
/// `G = row_normalize(F·Fᵀ)`.
pub fn sp_loss(tape: &Tape, f_s: &Tensor, f_t: &Tensor) -> Result<Tensor> {
    let b = f_s.rows();
    if b < 2 {
        return Err(DistillError::Config(format!(
            "similarity-preserving loss needs a batch of at least 2, got {b}"
        )));
    }
    let f_t = f_t.detach();
    let g_s = tape.l2_normalize_rows(&tape.matmul_nt(f_s, f_s)?)?;
    let g_t = tape.l2_normalize_rows(&tape.matmul_nt(&f_t, &f_t)?)?;
    let diff = tape.sub(&g_s, &g_t)?;
    let sq = tape.mul(&diff, &diff)?;
    let total = tape.sum(&sq);
    Ok(tape.scale(&total, 1.0 / (b * b) as f64))
}

/// The assembled student objective and its unweighted components.
pub struct StudentLoss {
    pub total: Tensor,
    pub ce: f64,
    pub kl: f64,
    pub kd: f64,
}

/// Builds `L_s = CE + β₁·mean(KL ⊙ d[:, N]) + β₂·Σ_spots gated(spot)`.
///
/// `d` must be a detached `[B, N+1]` gate (no gradient to the policy);
/// column i−1 gates spot i, the last column gates the logit spot.
pub fn assemble_student_loss(
    tape: &Tape,
    bundle_s: &FeatureBundle,
    bundle_t: &FeatureBundle,
    targets: &[usize],
    d: &Tensor,
    cfg: &DistillConfig,
    hints: &HintProjections,
    hints_bound: &Bound,
) -> Result<StudentLoss> {
    let n = bundle_s.block_features.len();
    cfg.spots.validate(n)?;
    if d.node().is_some() {
        return Err(DistillError::Config(
            "gate tensor must be detached before assembling the student loss".into(),
        ));
    }
    if d.shape() != [targets.len(), n + 1] {
        return Err(DistillError::Config(format!(
            "gate shape {:?} does not match batch {} with {} spots",
            d.shape(),
            targets.len(),
            n + 1
        )));
    }
    let batch = targets.len();

    let ce = tape.cross_entropy(&bundle_s.logits, targets)?;
    let mut total = ce.clone();

    let mut kl_value = 0.0;
    if cfg.spots.logit_spot {
        let kl_ps = tape.kl_divergence(
            &bundle_s.logits,
            &bundle_t.logits,
            cfg.temperature,
            cfg.kl_t2_scaling,
        )?;
        let gate_col = tape.select_cols(d, &vec![n; batch])?;
        let gated = tape.mul(&kl_ps, &gate_col)?;
        let kl_term = tape.mean(&gated);
        kl_value = kl_term.item();
        let weighted = tape.scale(&kl_term, cfg.beta1);
        total = tape.add(&total, &weighted)?;
    }

    let mut kd_value = 0.0;
    let mut kd_total: Option<Tensor> = None;
    for &spot in &cfg.spots.intermediate {
        let f_s = &bundle_s.block_features[spot - 1];
        let f_t = &bundle_t.block_features[spot - 1];
        let gate_col = tape.select_cols(d, &vec![spot - 1; batch])?;

        let spot_term = if cfg.kind.per_sample() {
            let per_sample = match cfg.kind {
                DistillerKind::Fitnets => {
                    let proj = hints.projection(spot).ok_or_else(|| {
                        DistillError::Config(format!("no hint projection entry for spot {spot}"))
                    })?;
                    let proj_tensors =
                        proj.map(|(w, b)| (hints_bound.get(w), hints_bound.get(b)));
                    fitnets_hint(tape, f_s, f_t, proj_tensors)?
                }
                DistillerKind::At => attention_transfer(tape, f_s, f_t, cfg.at_power)?,
                DistillerKind::KdKl => {
                    return Err(DistillError::Config(
                        "kd_kl distills only at the logit spot".into(),
                    ))
                }
                DistillerKind::Sp => unreachable!(),
            };
            let gated = tape.mul(&per_sample, &gate_col)?;
            tape.mean(&gated)
        } else {
            let batch_loss = match cfg.kind {
                DistillerKind::Sp => sp_loss(tape, f_s, f_t)?,
                _ => unreachable!(),
            };
            let gate_mean = gate_col.values().iter().sum::<f64>() / batch as f64;
            tape.scale(&batch_loss, gate_mean)
        };

        kd_total = Some(match kd_total {
            None => spot_term,
            Some(acc) => tape.add(&acc, &spot_term)?,
        });
    }
    if let Some(kd) = kd_total {
        kd_value = kd.item();
        let weighted = tape.scale(&kd, cfg.beta2);
        total = tape.add(&total, &weighted)?;
    }

    Ok(StudentLoss {
        ce: ce.item(),
        kl: kl_value,
        kd: kd_value,
        total,
    })
}

/// Baseline gating strategies around the adaptive decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Adaptive,
    Always,
    Anti,
    Rand,
    None,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Adaptive,
        Strategy::Always,
        Strategy::Anti,
        Strategy::Rand,
        Strategy::None,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Adaptive => "adaptive",
            Strategy::Always => "always",
            Strategy::Anti => "anti",
            Strategy::Rand => "rand",
            Strategy::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "adaptive" => Ok(Strategy::Adaptive),
            "always" => Ok(Strategy::Always),
            "anti" => Ok(Strategy::Anti),
            "rand" => Ok(Strategy::Rand),
            "none" => Ok(Strategy::None),
            other => Err(DistillError::Config(format!(
                "unknown strategy '{other}' (expected adaptive|always|anti|rand|none)"
            ))),
        }
    }

    /// Whether the policy and adaption layers are updated under this strategy.
    pub fn trains_policy(&self) -> bool {
        matches!(self, Strategy::Adaptive | Strategy::Anti)
    }
}

/// Turns the raw policy decision into the applied gate `d` for the student
/// loss. Always detached.
pub fn apply_strategy(
    strategy: Strategy,
    forward_w: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let shape = forward_w.shape().to_vec();
    let n = forward_w.len();
    let vals = match strategy {
        Strategy::Adaptive => forward_w.values().to_vec(),
        Strategy::Anti => forward_w.values().iter().map(|v| 1.0 - v).collect(),
        Strategy::Always => vec![1.0; n],
        Strategy::None => vec![0.0; n],
        Strategy::Rand => (0..n)
            .map(|_| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 })
            .collect(),
    };
    Ok(Tensor::new(shape, vals)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn fitnets_hint_values() {
        let tape = Tape::new();
        let f = t2(2, 4, &[0.5, -0.5, 1.0, 0.0, 2.0, 1.0, -1.0, 0.5]);
        let loss = fitnets_hint(&tape, &f, &f, None).unwrap();
        assert!(loss.iter().all(|v| *v == 0.0));

        let ones = t2(2, 4, &[1.0; 8]);
        let zeros = t2(2, 4, &[0.0; 8]);
        let loss = fitnets_hint(&tape, &ones, &zeros, None).unwrap();
        assert!(loss.iter().all(|v| (v - 1.0).abs() < 1e-15));

        // brute-force oracle on a random-ish pair
        let a = t2(1, 3, &[0.3, -1.2, 0.8]);
        let b = t2(1, 3, &[1.0, 0.5, -0.25]);
        let loss = fitnets_hint(&tape, &a, &b, None).unwrap();
        let oracle: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 3.0;
        assert!((loss.item() - oracle).abs() <= 1e-12);

        // width mismatch without projection is a config error
        let wide = t2(1, 5, &[0.0; 5]);
        assert!(fitnets_hint(&tape, &a, &wide, None).is_err());
    }

    #[test]
    fn attention_transfer_scale_invariance() {
        let tape = Tape::new();
        let f = t2(2, 3, &[0.4, -0.8, 1.2, 0.1, 0.0, -0.5]);
        let loss = attention_transfer(&tape, &f, &f, 2.0).unwrap();
        assert!(loss.iter().all(|v| v.abs() < 1e-15));

        let scaled_vals: Vec<f64> = f.iter().map(|v| 3.5 * v).collect();
        let scaled = t2(2, 3, &scaled_vals);
        let loss = attention_transfer(&tape, &scaled, &f, 2.0).unwrap();
        assert!(loss.iter().all(|v| v.abs() < 1e-24), "normalized attention must be scale invariant");

        // brute-force oracle
        let a = t2(1, 3, &[0.2, -0.7, 1.1]);
        let b = t2(1, 3, &[0.9, 0.3, -0.4]);
        let loss = attention_transfer(&tape, &a, &b, 2.0).unwrap();
        let att = |x: &[f64]| {
            let pows: Vec<f64> = x.iter().map(|v| v.abs().powi(2)).collect();
            let norm = pows.iter().map(|v| v * v).sum::<f64>().sqrt();
            pows.into_iter().map(|v| v / norm).collect::<Vec<f64>>()
        };
        let (aa, ab) = (att(a.values()), att(b.values()));
        let oracle: f64 = aa.iter().zip(&ab).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!((loss.item() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn sp_loss_cases() {
        let tape = Tape::new();
        let f = t2(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let loss = sp_loss(&tape, &f, &f).unwrap();
        assert!(loss.item().abs() < 1e-15);

        // orthogonal student rows vs identical teacher rows, B = 2
        let f_s = t2(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let f_t = t2(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let loss = sp_loss(&tape, &f_s, &f_t).unwrap();
        // oracle computed with naive loops
        let gram = |f: &Tensor| {
            let b = f.rows();
            let dim = f.cols();
            let mut g = vec![0.0; b * b];
            for i in 0..b {
                for j in 0..b {
                    for k in 0..dim {
                        g[i * b + j] += f.values()[i * dim + k] * f.values()[j * dim + k];
                    }
                }
            }
            for i in 0..b {
                let norm: f64 = (0..b).map(|j| g[i * b + j] * g[i * b + j]).sum::<f64>().sqrt();
                if norm > 0.0 {
                    for j in 0..b {
                        g[i * b + j] /= norm;
                    }
                }
            }
            g
        };
        let (gs, gt) = (gram(&f_s), gram(&f_t));
        let oracle: f64 =
            gs.iter().zip(&gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 4.0;
        assert!((loss.item() - oracle).abs() <= 1e-12);

        // batch permutation invariance
        let f_s_perm = t2(2, 2, &[0.0, 2.0, 1.0, 0.0]);
        let f_t_perm = t2(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let loss_perm = sp_loss(&tape, &f_s_perm, &f_t_perm).unwrap();
        assert!((loss.item() - loss_perm.item()).abs() <= 1e-12);

        let single = t2(1, 2, &[1.0, 0.0]);
        assert!(sp_loss(&tape, &single, &single).is_err());
    }

    #[test]
    fn strategy_masks() {
        let fw = t2(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);

        let adaptive = apply_strategy(Strategy::Adaptive, &fw, &mut rng).unwrap();
        let anti = apply_strategy(Strategy::Anti, &fw, &mut rng).unwrap();
        for (a, b) in adaptive.iter().zip(anti.iter()) {
            assert_eq!(a + b, 1.0);
        }

        let always = apply_strategy(Strategy::Always, &fw, &mut rng).unwrap();
        assert!(always.iter().all(|v| *v == 1.0));
        let none = apply_strategy(Strategy::None, &fw, &mut rng).unwrap();
        assert!(none.iter().all(|v| *v == 0.0));

        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let m1 = apply_strategy(Strategy::Rand, &fw, &mut r1).unwrap();
        let m2 = apply_strategy(Strategy::Rand, &fw, &mut r2).unwrap();
        assert_eq!(m1.values(), m2.values());
        assert!(m1.iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn spot_defaults_follow_convention() {
        assert_eq!(SpotSet::defaults(DistillerKind::Fitnets, 4).intermediate, vec![3]);
        assert_eq!(SpotSet::defaults(DistillerKind::At, 4).intermediate, vec![2, 3]);
        assert_eq!(SpotSet::defaults(DistillerKind::Sp, 4).intermediate, vec![3]);
        assert!(SpotSet::defaults(DistillerKind::KdKl, 4).intermediate.is_empty());
        assert!(SpotSet::defaults(DistillerKind::KdKl, 4).logit_spot);

        let bad = SpotSet { intermediate: vec![5], logit_spot: true };
        assert!(bad.validate(4).is_err());
    }

    #[test]
    fn default_beta2_values() {
        assert_eq!(DistillerKind::Fitnets.default_beta2(), 1.0);
        assert_eq!(DistillerKind::At.default_beta2(), 1000.0);
        assert_eq!(DistillerKind::Sp.default_beta2(), 3000.0);
    }
}
