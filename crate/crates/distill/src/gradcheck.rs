//! Finite-difference verification suites, scoped from single ops up to the
//! full two-loss training objective on a seeded 2-block teacher/student pair.
//!
//! Every analytic gradient must match central differences (ε = 1e-5) within a
//! relative error of 1e-4. For the end-to-end scope, each loss is checked
//! against exactly the parameter group it trains: the student objective over
//! student and hint parameters (decision gate held fixed, as the stop-gradient
//! contract prescribes), the routing objective over policy and adaption
//! parameters (noise frozen).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tapegrad::{finite_diff_check, Tape, Tensor};

use crate::distillers::{assemble_student_loss, DistillConfig, DistillerKind, HintProjections};
use crate::error::{DistillError, Result};
use crate::network::{build_network, AdaptionSet, BlockSpec, NetworkSpec};
use crate::params::{Bound, ParamStore};
use crate::policy::{sample_gumbel, straight_through, PolicyParams};
use crate::routing::{routing_forward, RoutingBound, RoutingNetwork};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Network,
    Policy,
    EndToEnd,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Scope> {
        match s {
            "ops" => Ok(Scope::Ops),
            "network" => Ok(Scope::Network),
            "policy" => Ok(Scope::Policy),
            "end-to-end" => Ok(Scope::EndToEnd),
            other => Err(DistillError::Config(format!(
                "unknown gradcheck scope '{other}' (expected ops|network|policy|end-to-end)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scope::Ops => "ops",
            Scope::Network => "network",
            Scope::Policy => "policy",
            Scope::EndToEnd => "end-to-end",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScopeReport {
    pub scope: &'static str,
    pub max_rel_error: f64,
    pub checks: usize,
    pub worst: String,
}

impl ScopeReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

struct Collector {
    max: f64,
    checks: usize,
    worst: String,
}

impl Collector {
    fn new() -> Collector {
        Collector {
            max: 0.0,
            checks: 0,
            worst: String::new(),
        }
    }

    fn record(&mut self, name: &str, err: f64) {
        self.checks += 1;
        if err > self.max {
            self.max = err;
            self.worst = name.to_string();
        }
    }

    fn report(self, scope: &'static str) -> ScopeReport {
        ScopeReport {
            scope,
            max_rel_error: self.max,
            checks: self.checks,
            worst: self.worst,
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape, vals).expect("sized buffer")
}

pub fn run_scope(scope: Scope) -> Result<ScopeReport> {
    match scope {
        Scope::Ops => check_ops(),
        Scope::Network => check_network(),
        Scope::Policy => check_policy(),
        Scope::EndToEnd => check_end_to_end(),
    }
}

pub fn run_scopes(scopes: &[Scope]) -> Result<Vec<ScopeReport>> {
    scopes.iter().map(|s| run_scope(*s)).collect()
}

fn check_ops() -> Result<ScopeReport> {
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(0xC0FFEE);
    let mut col = Collector::new();

    for round in 0..8 {
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        let b2 = b.clone();
        col.record(
            &format!("matmul[{round}]"),
            finite_diff_check(move |t, x| t.matmul(x, &b2).map(|y| t.sum(&y)), &a, STEP)
                .map_err(DistillError::Tape)?,
        );

        let e = rand_tensor(&mut rng, vec![2, 5]);
        let f = rand_tensor(&mut rng, vec![2, 5]);
        let f2 = f.clone();
        col.record(
            &format!("mul[{round}]"),
            finite_diff_check(move |t, x| t.mul(x, &f2).map(|y| t.sum(&y)), &e, STEP)
                .map_err(DistillError::Tape)?,
        );
        col.record(
            &format!("relu[{round}]"),
            finite_diff_check(
                |t, x| {
                    let y = t.relu(x);
                    let sq = t.mul(&y, &y)?;
                    Ok(t.sum(&sq))
                },
                &e,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );
        col.record(
            &format!("softmax[{round}]"),
            finite_diff_check(
                |t, x| {
                    let s = t.softmax(x)?;
                    let picked = t.select_cols(&s, &[0, 3])?;
                    let sq = t.mul(&picked, &picked)?;
                    Ok(t.sum(&sq))
                },
                &e,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );
        col.record(
            &format!("cross_entropy[{round}]"),
            finite_diff_check(|t, x| t.cross_entropy(x, &[1, 4]), &e, STEP)
                .map_err(DistillError::Tape)?,
        );

        let teacher = rand_tensor(&mut rng, vec![2, 5]);
        col.record(
            &format!("kl_divergence[{round}]"),
            finite_diff_check(
                move |t, x| {
                    let kl = t.kl_divergence(x, &teacher, 4.0, true)?;
                    Ok(t.mean(&kl))
                },
                &e,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );

        let g = rand_tensor(&mut rng, vec![3, 4]);
        let h = rand_tensor(&mut rng, vec![3, 4]);
        let wvals: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..0.9)).collect();
        let w = Tensor::new(vec![3], wvals).expect("sized buffer");
        let (h2, w2) = (h.clone(), w.clone());
        col.record(
            &format!("convex_combine[{round}]"),
            finite_diff_check(
                move |t, x| {
                    let y = t.convex_combine(x, &h2, &w2)?;
                    let sq = t.mul(&y, &y)?;
                    Ok(t.sum(&sq))
                },
                &g,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );
        let (g2, h2) = (g.clone(), h.clone());
        col.record(
            &format!("convex_combine_w[{round}]"),
            finite_diff_check(
                move |t, x| {
                    let y = t.convex_combine(&g2, &h2, x)?;
                    let sq = t.mul(&y, &y)?;
                    Ok(t.sum(&sq))
                },
                &w,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );

        col.record(
            &format!("l2_normalize_rows[{round}]"),
            finite_diff_check(
                |t, x| {
                    let y = t.l2_normalize_rows(x)?;
                    let picked = t.select_cols(&y, &[1, 2, 0])?;
                    let sq = t.mul(&picked, &picked)?;
                    Ok(t.sum(&sq))
                },
                &g,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );
        col.record(
            &format!("abs_pow[{round}]"),
            finite_diff_check(|t, x| t.abs_pow(x, 2.0).map(|y| t.sum(&y)), &g, STEP)
                .map_err(DistillError::Tape)?,
        );
        let probe = rand_tensor(&mut rng, vec![3, 3]);
        col.record(
            &format!("matmul_nt[{round}]"),
            finite_diff_check(
                move |t, x| {
                    let y = t.matmul_nt(x, x)?;
                    let n = t.l2_normalize_rows(&y)?;
                    let weighted = t.mul(&n, &probe)?;
                    Ok(t.sum(&weighted))
                },
                &g,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );

        let bias = rand_tensor(&mut rng, vec![4]);
        let g3 = g.clone();
        col.record(
            &format!("add_bias[{round}]"),
            finite_diff_check(
                move |t, x| {
                    let y = t.add_bias(&g3, x)?;
                    let sq = t.mul(&y, &y)?;
                    Ok(t.sum(&sq))
                },
                &bias,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );

        let k = rand_tensor(&mut rng, vec![3, 2]);
        let k2 = k.clone();
        col.record(
            &format!("concat[{round}]"),
            finite_diff_check(
                move |t, x| {
                    let y = t.concat_cols(x, &k2)?;
                    let sq = t.mul(&y, &y)?;
                    Ok(t.sum(&sq))
                },
                &g,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );
        col.record(
            &format!("sum_rows[{round}]"),
            finite_diff_check(
                |t, x| {
                    let y = t.sum_rows(x)?;
                    let sq = t.mul(&y, &y)?;
                    Ok(t.sum(&sq))
                },
                &g,
                STEP,
            )
            .map_err(DistillError::Tape)?,
        );
    }

    Ok(col.report("ops"))
}

/// The seeded 2-block fixture shared by the network, policy and end-to-end
/// scopes.
struct Fixture {
    rn: RoutingNetwork,
    hints: HintProjections,
    dcfg: DistillConfig,
    x: Tensor,
    targets: Vec<usize>,
    noise: Tensor,
    gate_fixed: Tensor,
    tau: f64,
}

fn fixture() -> Result<Fixture> {
    let teacher_spec = NetworkSpec {
        input_dim: 6,
        blocks: vec![BlockSpec::relu_stack(&[7]), BlockSpec::relu_stack(&[6])],
        classifier_dim: 3,
    };
    let student_spec = NetworkSpec {
        input_dim: 6,
        blocks: vec![BlockSpec::relu_stack(&[5]), BlockSpec::relu_stack(&[4])],
        classifier_dim: 3,
    };
    let mut teacher = build_network(&teacher_spec, 1001)?;
    teacher.freeze();
    let student = build_network(&student_spec, 1002)?;
    let adaptions = AdaptionSet::build(&teacher_spec, &student_spec, 1003)?;
    let policy = PolicyParams::build(&teacher_spec, &student_spec, 1004);

    let mut dcfg = DistillConfig::for_kind(DistillerKind::Fitnets, 2);
    dcfg.spots.intermediate = vec![2];
    let hints = HintProjections::build(&dcfg, &teacher_spec, &student_spec, 1005)?;

    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(1006);
    let x = rand_tensor(&mut rng, vec![4, 6]);
    let targets = vec![0usize, 2, 1, 0];
    let noise = sample_gumbel(&[4, 3, 2], &mut rng);

    let rn = RoutingNetwork::new(teacher, student, adaptions, policy)?;

    // One adaptive decision, frozen for the student-loss checks.
    let tape = Tape::new();
    let teacher_bound = rn.teacher.bind_const();
    let bundle_t = rn.teacher.forward_features(&tape, &teacher_bound, &x)?;
    let student_bound = rn.student.bind_const();
    let bundle_s = rn.student.forward_features(&tape, &student_bound, &x)?;
    let policy_bound = rn.policy.bind_const();
    let logits = rn.policy.logits(
        &tape,
        &policy_bound,
        &bundle_t.block_features[1].detach(),
        &bundle_s.block_features[1].detach(),
    )?;
    let tau = 1.5;
    let decision = straight_through(&tape, &logits, &noise, tau)?;

    Ok(Fixture {
        rn,
        hints,
        dcfg,
        x,
        targets,
        noise,
        gate_fixed: decision.forward_w.detach(),
        tau,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum StoreSel {
    Student,
    Hints,
    Policy,
    Adaptions,
}

fn bind_override(store: &ParamStore, ov: Option<(usize, &Tensor)>) -> Bound {
    Bound {
        tensors: store
            .iter()
            .enumerate()
            .map(|(i, p)| match ov {
                Some((j, t)) if j == i => t.clone(),
                _ => p.value.detach(),
            })
            .collect(),
    }
}

/// Student objective with the decision gate held fixed; one parameter may be
/// overridden by the (possibly watched) tensor `ov`.
fn student_loss_at(
    tape: &Tape,
    fix: &Fixture,
    sel: StoreSel,
    idx: usize,
    ov: &Tensor,
) -> tapegrad::Result<Tensor> {
    let inner = || -> Result<Tensor> {
        let student_ov = (sel == StoreSel::Student).then_some((idx, ov));
        let hints_ov = (sel == StoreSel::Hints).then_some((idx, ov));

        let teacher_bound = fix.rn.teacher.bind_const();
        let bundle_t = fix.rn.teacher.forward_features(tape, &teacher_bound, &fix.x)?;
        let student_bound = bind_override(&fix.rn.student.params, student_ov);
        let bundle_s = fix.rn.student.forward_features(tape, &student_bound, &fix.x)?;
        let hints_bound = bind_override(&fix.hints.params, hints_ov);
        let loss = assemble_student_loss(
            tape,
            &bundle_s,
            &bundle_t,
            &fix.targets,
            &fix.gate_fixed,
            &fix.dcfg,
            &fix.hints,
            &hints_bound,
        )?;
        Ok(loss.total)
    };
    inner().map_err(to_tape_error)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum GateMode {
    /// Discrete straight-through value, as used in training.
    Hard,
    /// Relaxed weights; the surrogate whose true gradient the
    /// straight-through estimator reports for the policy.
    Relaxed,
}

/// Routing objective with frozen noise; one parameter may be overridden.
fn routing_loss_at(
    tape: &Tape,
    fix: &Fixture,
    sel: StoreSel,
    idx: usize,
    ov: &Tensor,
    mode: GateMode,
) -> tapegrad::Result<Tensor> {
    let inner = || -> Result<Tensor> {
        let policy_ov = (sel == StoreSel::Policy).then_some((idx, ov));
        let adapt_ov = (sel == StoreSel::Adaptions).then_some((idx, ov));

        let teacher_bound = fix.rn.teacher.bind_const();
        let bundle_t = fix.rn.teacher.forward_features(tape, &teacher_bound, &fix.x)?;
        let student_bound = fix.rn.student.bind_const();
        let bundle_s = fix.rn.student.forward_features(tape, &student_bound, &fix.x)?;

        let policy_bound = bind_override(&fix.rn.policy.params, policy_ov);
        let logits = fix.rn.policy.logits(
            tape,
            &policy_bound,
            &bundle_t.block_features[1].detach(),
            &bundle_s.block_features[1].detach(),
        )?;
        let decision = straight_through(tape, &logits, &fix.noise, fix.tau)?;
        let gate = match mode {
            GateMode::Hard => &decision.gate,
            GateMode::Relaxed => &decision.relaxed_w,
        };

        let bound = RoutingBound {
            teacher: fix.rn.teacher.bind_const(),
            student: fix.rn.student.bind_const(),
            adaptions: bind_override(&fix.rn.adaptions.params, adapt_ov),
        };
        let routed = routing_forward(tape, &fix.rn, &bound, &fix.x, gate)?;
        let ce = tape.cross_entropy(&routed, &fix.targets)?;
        Ok(tape.scale(&ce, fix.dcfg.beta3))
    };
    inner().map_err(to_tape_error)
}

fn to_tape_error(e: DistillError) -> tapegrad::Error {
    match e {
        DistillError::Tape(t) => t,
        other => tapegrad::Error::Usage(other.to_string()),
    }
}

fn check_store<F>(col: &mut Collector, label: &str, store: &ParamStore, f: F) -> Result<()>
where
    F: Fn(&Tape, usize, &Tensor) -> tapegrad::Result<Tensor>,
{
    for idx in 0..store.len() {
        let param = store.get(idx);
        let err = finite_diff_check(|t, x| f(t, idx, x), &param.value, STEP)
            .map_err(DistillError::Tape)?;
        col.record(&format!("{label}:{}", param.name), err);
    }
    Ok(())
}

fn check_network() -> Result<ScopeReport> {
    let fix = fixture()?;
    let mut col = Collector::new();

    check_store(&mut col, "student-ce", &fix.rn.student.params, |tape, idx, ov| {
        let bound = bind_override(&fix.rn.student.params, Some((idx, ov)));
        let bundle = fix
            .rn
            .student
            .forward_features(tape, &bound, &fix.x)
            .map_err(to_tape_error)?;
        tape.cross_entropy(&bundle.logits, &fix.targets)
    })?;

    // input gradient through the full feature stack
    let err = finite_diff_check(
        |tape, x| {
            let bound = fix.rn.student.bind_const();
            let bundle = fix
                .rn
                .student
                .forward_features(tape, &bound, x)
                .map_err(to_tape_error)?;
            tape.cross_entropy(&bundle.logits, &fix.targets)
        },
        &fix.x,
        STEP,
    )
    .map_err(DistillError::Tape)?;
    col.record("student-ce:input", err);

    Ok(col.report("network"))
}

fn check_policy() -> Result<ScopeReport> {
    let fix = fixture()?;
    let mut col = Collector::new();

    // Weighted sum of relaxed weights as the probe objective.
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(2007);
    let probe = rand_tensor(&mut rng, vec![4, 3]);

    check_store(&mut col, "policy-relaxed", &fix.rn.policy.params, |tape, idx, ov| {
        let inner = || -> Result<Tensor> {
            let teacher_bound = fix.rn.teacher.bind_const();
            let bundle_t = fix.rn.teacher.forward_features(tape, &teacher_bound, &fix.x)?;
            let student_bound = fix.rn.student.bind_const();
            let bundle_s = fix.rn.student.forward_features(tape, &student_bound, &fix.x)?;
            let bound = bind_override(&fix.rn.policy.params, Some((idx, ov)));
            let logits = fix.rn.policy.logits(
                tape,
                &bound,
                &bundle_t.block_features[1].detach(),
                &bundle_s.block_features[1].detach(),
            )?;
            let decision = straight_through(tape, &logits, &fix.noise, fix.tau)?;
            let weighted = tape.mul(&decision.relaxed_w, &probe)?;
            Ok(tape.sum(&weighted))
        };
        inner().map_err(to_tape_error)
    })?;

    // Straight-through identity: gradient through the gate equals the
    // gradient through the relaxed weights, bitwise.
    let tape = Tape::new();
    let mut raw = rand_tensor(&mut rng, vec![4, 3 * 2]);
    raw.set_requires_grad(true);
    let watched = tape.watch(&raw);
    let logits = tape.reshape(&watched, vec![4, 3, 2]).map_err(DistillError::Tape)?;
    let decision = straight_through(&tape, &logits, &fix.noise, fix.tau)?;
    let probe2 = probe.clone();
    let via_gate = tape
        .sum(&tape.mul(&decision.gate, &probe2).map_err(DistillError::Tape)?);
    let via_relaxed = tape
        .sum(&tape.mul(&decision.relaxed_w, &probe2).map_err(DistillError::Tape)?);
    let g1 = tape.backward(&via_gate).map_err(DistillError::Tape)?;
    let g2 = tape.backward(&via_relaxed).map_err(DistillError::Tape)?;
    let (a, b) = (
        g1.get(&watched).unwrap_or(&[]),
        g2.get(&watched).unwrap_or(&[]),
    );
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
        return Err(DistillError::GradCheck(
            "straight-through gradient does not match the relaxed gradient bitwise".into(),
        ));
    }
    col.record("straight-through-identity", 0.0);

    Ok(col.report("policy"))
}

fn check_end_to_end() -> Result<ScopeReport> {
    let fix = fixture()?;
    let mut col = Collector::new();

    check_store(&mut col, "L_s/student", &fix.rn.student.params, |t, i, ov| {
        student_loss_at(t, &fix, StoreSel::Student, i, ov)
    })?;
    check_store(&mut col, "L_s/hints", &fix.hints.params, |t, i, ov| {
        student_loss_at(t, &fix, StoreSel::Hints, i, ov)
    })?;
    check_store(&mut col, "L_routing/policy", &fix.rn.policy.params, |t, i, ov| {
        routing_loss_at(t, &fix, StoreSel::Policy, i, ov, GateMode::Relaxed)
    })?;
    check_store(
        &mut col,
        "L_routing/adaptions",
        &fix.rn.adaptions.params,
        |t, i, ov| routing_loss_at(t, &fix, StoreSel::Adaptions, i, ov, GateMode::Hard),
    )?;

    Ok(col.report("end-to-end"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_scope_passes() {
        let report = run_scope(Scope::Ops).unwrap();
        assert!(report.passed(), "max err {} at {}", report.max_rel_error, report.worst);
        assert!(report.checks >= 100, "want ≥100 randomized checks, got {}", report.checks);
    }

    #[test]
    fn network_scope_passes() {
        let report = run_scope(Scope::Network).unwrap();
        assert!(report.passed(), "max err {} at {}", report.max_rel_error, report.worst);
    }

    #[test]
    fn policy_scope_passes() {
        let report = run_scope(Scope::Policy).unwrap();
        assert!(report.passed(), "max err {} at {}", report.max_rel_error, report.worst);
    }

    #[test]
    fn end_to_end_scope_passes() {
        let report = run_scope(Scope::EndToEnd).unwrap();
        assert!(report.passed(), "max err {} at {}", report.max_rel_error, report.worst);
    }

    #[test]
    fn scope_parsing() {
        assert_eq!(Scope::parse("ops").unwrap(), Scope::Ops);
        assert_eq!(Scope::parse("end-to-end").unwrap(), Scope::EndToEnd);
        assert!(Scope::parse("everything").is_err());
    }
}
