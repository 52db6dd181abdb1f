//! The merged teacher/student network: one interleaved forward pass per batch
//! under a routing decision, producing the routing loss that trains the policy
//! and the adaption layers.
//!
//! Inside this pass the student acts as a fixed function: its parameters are
//! bound as constants, so the routing backward can reach the policy (through
//! the gate weights) and the adaption layers (through both streams) but never
//! the student parameters. The teacher is frozen for the experiment's
//! lifetime.

use tapegrad::{Tape, Tensor};

use crate::error::{DistillError, Result};
use crate::network::{AdaptDirection, AdaptionSet, Network};
use crate::params::Bound;
use crate::policy::PolicyParams;

#[derive(Debug, Clone)]
pub struct RoutingNetwork {
    pub teacher: Network,
    pub student: Network,
    pub adaptions: AdaptionSet,
    pub policy: PolicyParams,
}

impl RoutingNetwork {
    pub fn new(
        teacher: Network,
        student: Network,
        adaptions: AdaptionSet,
        policy: PolicyParams,
    ) -> Result<RoutingNetwork> {
        if teacher.spec.block_count() != student.spec.block_count() {
            return Err(DistillError::Config(format!(
                "teacher and student must share block granularity, got {} vs {}",
                teacher.spec.block_count(),
                student.spec.block_count()
            )));
        }
        if adaptions.spot_count() != teacher.spec.block_count() {
            return Err(DistillError::Config(format!(
                "adaption set covers {} spots but networks have {} blocks",
                adaptions.spot_count(),
                teacher.spec.block_count()
            )));
        }
        Ok(RoutingNetwork {
            teacher,
            student,
            adaptions,
            policy,
        })
    }

    /// Number of blocks N shared by both networks.
    pub fn block_count(&self) -> usize {
        self.teacher.spec.block_count()
    }

    /// Number of decision spots N+1.
    pub fn spot_count(&self) -> usize {
        self.block_count() + 1
    }
}

/// Parameter bindings for one routing pass. Teacher and student enter as
/// constants; adaptions carry gradients.
pub struct RoutingBound {
    pub teacher: Bound,
    pub student: Bound,
    pub adaptions: Bound,
}

impl RoutingBound {
    /// Standard binding for a training step: adaptions watched on the tape,
    /// teacher and student as constants (the student is in eval mode here).
    pub fn for_step(rn: &RoutingNetwork, tape: &Tape) -> RoutingBound {
        RoutingBound {
            teacher: rn.teacher.bind_const(),
            student: rn.student.bind_const(),
            adaptions: rn.adaptions.bind(tape),
        }
    }
}

/// Interleaved forward pass under per-sample gate weights `w` of shape
/// `[B, N+1]` (1 = teacher path). Returns the routed classifier logits.
///
/// At each spot i the streams cross-feed through the adaption maps:
///   input_s ← wᵢ·H_ts(f_t) + (1−wᵢ)·f_s
///   input_t ← wᵢ·f_t + (1−wᵢ)·H_st(f_s)
/// and the final logits fuse with the last gate column.
pub fn routing_forward(
    tape: &Tape,
    rn: &RoutingNetwork,
    bound: &RoutingBound,
    x: &Tensor,
    w: &Tensor,
) -> Result<Tensor> {
    let n = rn.block_count();
    if w.shape().len() != 2 || w.cols() != n + 1 {
        return Err(DistillError::Config(format!(
            "decision covers {:?} spots but the routing network has {} spots",
            w.shape(),
            n + 1
        )));
    }
    if w.rows() != x.rows() {
        return Err(DistillError::Config(format!(
            "decision batch {} does not match input batch {}",
            w.rows(),
            x.rows()
        )));
    }

    let batch = x.rows();
    let mut input_t = x.clone();
    let mut input_s = x.clone();

    for i in 0..n {
        let f_t = rn.teacher.block_forward(tape, &bound.teacher, i, &input_t)?;
        let f_s = rn.student.block_forward(tape, &bound.student, i, &input_s)?;

        let w_i = tape.select_cols(w, &vec![i; batch])?;

        let adapted_ts = rn.adaptions.adapt(
            tape,
            &bound.adaptions,
            i + 1,
            AdaptDirection::TeacherToStudent,
            &f_t,
        )?;
        let adapted_st = rn.adaptions.adapt(
            tape,
            &bound.adaptions,
            i + 1,
            AdaptDirection::StudentToTeacher,
            &f_s,
        )?;

        input_s = tape.convex_combine(&adapted_ts, &f_s, &w_i)?;
        input_t = tape.convex_combine(&f_t, &adapted_st, &w_i)?;
    }

    let logits_t = rn.teacher.classifier_forward(tape, &bound.teacher, &input_t)?;
    let logits_s = rn.student.classifier_forward(tape, &bound.student, &input_s)?;
    let w_last = tape.select_cols(w, &vec![n; batch])?;
    Ok(tape.convex_combine(&logits_t, &logits_s, &w_last)?)
}

/// Routing objective: `β₃ · CE(routed logits, targets)`. Only policy and
/// adaption parameters lie upstream of it.
pub fn routing_loss(
    tape: &Tape,
    routing_logits: &Tensor,
    targets: &[usize],
    beta3: f64,
) -> Result<Tensor> {
    if beta3 < 0.0 {
        return Err(DistillError::Config(format!(
            "beta3 must be non-negative, got {beta3}"
        )));
    }
    let ce = tape.cross_entropy(routing_logits, targets)?;
    Ok(tape.scale(&ce, beta3))
}
