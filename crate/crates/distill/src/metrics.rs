//! Metrics table: one CSV row per (epoch, split) with loss components,
//! accuracy, raw per-spot routing probabilities and applied gate rates.
//!
//! Floats use Rust's shortest round-trip formatting, so files are byte-stable
//! across reruns of the same seeded run.

use crate::trainer::{EpochStats, SplitMetrics};

/// Column header for `spots` decision spots.
pub fn header(spots: usize) -> String {
    let mut cols = vec![
        "epoch".to_string(),
        "split".to_string(),
        "ce".to_string(),
        "kl".to_string(),
        "kd".to_string(),
        "routing".to_string(),
        "accuracy".to_string(),
    ];
    for i in 1..=spots {
        cols.push(format!("p_spot_{i}"));
    }
    for i in 1..=spots {
        cols.push(format!("g_spot_{i}"));
    }
    cols.join(",")
}

fn row(epoch: usize, split: &str, m: &SplitMetrics) -> String {
    let mut cols = vec![
        epoch.to_string(),
        split.to_string(),
        format!("{}", m.ce),
        format!("{}", m.kl),
        format!("{}", m.kd),
        format!("{}", m.routing),
        format!("{}", m.accuracy),
    ];
    cols.extend(m.p_spots.iter().map(|v| format!("{v}")));
    cols.extend(m.gate_rates.iter().map(|v| format!("{v}")));
    cols.join(",")
}

/// Renders the full metrics table for a run.
pub fn render(stats: &[EpochStats], spots: usize) -> String {
    let mut out = header(spots);
    out.push('\n');
    for s in stats {
        out.push_str(&row(s.epoch, "train", &s.train));
        out.push('\n');
        out.push_str(&row(s.epoch, "test", &s.test));
        out.push('\n');
    }
    out
}
