//! Routed knowledge distillation on dense networks.
//!
//! A frozen teacher and a trainable student are merged into a multi-path
//! routing network. A lightweight policy layer decides, per sample and per
//! spot, whether the data flows through teacher or student blocks; the same
//! decision gates which distillation losses apply to that sample. The policy
//! samples its discrete routing choices with the Gumbel-Softmax
//! straight-through estimator and trains — together with the cross-stream
//! adaption layers — under a separate routing objective.
//!
//! Crate layout mirrors the pipeline: [`network`] (block networks, adaption
//! maps), [`policy`] (Gumbel routing decisions), [`routing`] (the interleaved
//! pass), [`distillers`] (gated losses), [`trainer`] (the two-group training
//! loop), and the experiment harness ([`config`], [`data`], [`checkpoint`],
//! [`metrics`], [`experiment`], [`gradcheck`]).

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distillers;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod params;
pub mod policy;
pub mod routing;
pub mod trainer;

pub use error::{DistillError, Result};
