//! Versioned text checkpoints.
//!
//! Structure (keys, shapes, metadata) is plain text; parameter values are
//! written as 16-digit hex `f64` bit patterns so round-trips are bitwise
//! exact — determinism tests compare these files byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{DistillError, Result};
use crate::network::{Activation, BlockSpec, LayerSpec, Network, NetworkSpec};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epoch: usize,
    pub config_digest: String,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn activation_tag(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::None => "none",
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "none" => Ok(Activation::None),
        other => Err(DistillError::Integrity(format!("unknown activation '{other}'"))),
    }
}

/// Renders a checkpoint document for a network and its metadata.
pub fn render_checkpoint(net: &Network, meta: &CheckpointMeta) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "format_version {FORMAT_VERSION}");
    let _ = writeln!(out, "meta.seed {}", meta.seed);
    let _ = writeln!(out, "meta.epoch {}", meta.epoch);
    let _ = writeln!(out, "meta.config_digest {}", meta.config_digest);
    let _ = writeln!(out, "meta.train_accuracy {:016x}", meta.train_accuracy.to_bits());
    let _ = writeln!(out, "meta.test_accuracy {:016x}", meta.test_accuracy.to_bits());
    let _ = writeln!(out, "spec.input_dim {}", net.spec.input_dim);
    let _ = writeln!(out, "spec.classifier_dim {}", net.spec.classifier_dim);
    let _ = writeln!(out, "spec.blocks {}", net.spec.blocks.len());
    for (i, b) in net.spec.blocks.iter().enumerate() {
        let layers: Vec<String> = b
            .layers
            .iter()
            .map(|l| format!("{}:{}", l.width, activation_tag(l.activation)))
            .collect();
        let _ = writeln!(out, "spec.block.{i} {}", layers.join(","));
    }
    for p in net.params.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "param {} {}", p.name, dims.join("x"));
        let mut line = String::with_capacity(p.value.len() * 17);
        for (i, v) in p.value.iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{:016x}", v.to_bits());
        }
        out.push_str(&line);
        out.push('\n');
    }
    out.push_str("end\n");
    out
}

pub fn save_checkpoint(net: &Network, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    std::fs::write(path, render_checkpoint(net, meta))?;
    Ok(())
}

/// Parses a checkpoint document back into a network and its metadata.
pub fn parse_checkpoint(text: &str) -> Result<(Network, CheckpointMeta)> {
    let mut lines = text.lines().peekable();

    let version_line = lines
        .next()
        .ok_or_else(|| DistillError::Integrity("empty checkpoint".into()))?;
    let version: u32 = version_line
        .strip_prefix("format_version ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DistillError::Integrity("missing format_version header".into()))?;
    if version != FORMAT_VERSION {
        return Err(DistillError::CheckpointVersion {
            expected: FORMAT_VERSION,
            found: version,
        });
    }

    let mut meta = CheckpointMeta::default();
    let mut input_dim = 0usize;
    let mut classifier_dim = 0usize;
    let mut n_blocks = 0usize;
    let mut blocks: Vec<BlockSpec> = Vec::new();
    let mut params = ParamStore::new();
    let mut saw_end = false;

    let parse_bits = |s: &str, what: &str| -> Result<f64> {
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|_| DistillError::Integrity(format!("bad hex float in {what}: '{s}'")))
    };

    while let Some(line) = lines.next() {
        if line == "end" {
            saw_end = true;
            break;
        }
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| DistillError::Integrity(format!("malformed line '{line}'")))?;
        match key {
            "meta.seed" => {
                meta.seed = rest
                    .parse()
                    .map_err(|_| DistillError::Integrity("bad meta.seed".into()))?
            }
            "meta.epoch" => {
                meta.epoch = rest
                    .parse()
                    .map_err(|_| DistillError::Integrity("bad meta.epoch".into()))?
            }
            "meta.config_digest" => meta.config_digest = rest.to_string(),
            "meta.train_accuracy" => meta.train_accuracy = parse_bits(rest, "meta.train_accuracy")?,
            "meta.test_accuracy" => meta.test_accuracy = parse_bits(rest, "meta.test_accuracy")?,
            "spec.input_dim" => {
                input_dim = rest
                    .parse()
                    .map_err(|_| DistillError::Integrity("bad spec.input_dim".into()))?
            }
            "spec.classifier_dim" => {
                classifier_dim = rest
                    .parse()
                    .map_err(|_| DistillError::Integrity("bad spec.classifier_dim".into()))?
            }
            "spec.blocks" => {
                n_blocks = rest
                    .parse()
                    .map_err(|_| DistillError::Integrity("bad spec.blocks".into()))?
            }
            "param" => {
                let (name, dims) = rest
                    .split_once(' ')
                    .ok_or_else(|| DistillError::Integrity(format!("malformed param line '{rest}'")))?;
                let shape: Vec<usize> = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| DistillError::Integrity(format!("bad shape for param {name}")))?;
                let numel: usize = shape.iter().product();
                let data_line = lines
                    .next()
                    .ok_or_else(|| DistillError::Integrity(format!("missing data for param {name}")))?;
                let values: Vec<f64> = data_line
                    .split(' ')
                    .filter(|t| !t.is_empty())
                    .map(|t| parse_bits(t, name))
                    .collect::<Result<_>>()?;
                if values.len() != numel {
                    return Err(DistillError::Integrity(format!(
                        "param {name}: expected {numel} values for shape {shape:?}, found {}",
                        values.len()
                    )));
                }
                params.push(
                    name,
                    tapegrad::Tensor::new(shape, values).map_err(DistillError::Tape)?,
                );
            }
            _ if key.starts_with("spec.block.") => {
                let layers: Vec<LayerSpec> = rest
                    .split(',')
                    .map(|tok| {
                        let (w, a) = tok.split_once(':').ok_or_else(|| {
                            DistillError::Integrity(format!("malformed layer '{tok}'"))
                        })?;
                        Ok(LayerSpec {
                            width: w.parse().map_err(|_| {
                                DistillError::Integrity(format!("bad layer width '{w}'"))
                            })?,
                            activation: parse_activation(a)?,
                        })
                    })
                    .collect::<Result<_>>()?;
                blocks.push(BlockSpec { layers });
            }
            other => {
                return Err(DistillError::Integrity(format!(
                    "unknown checkpoint key '{other}'"
                )))
            }
        }
    }

    if !saw_end {
        return Err(DistillError::Integrity("checkpoint truncated (no end marker)".into()));
    }
    if blocks.len() != n_blocks {
        return Err(DistillError::Integrity(format!(
            "declared {n_blocks} blocks but found {}",
            blocks.len()
        )));
    }
    let spec = NetworkSpec {
        input_dim,
        blocks,
        classifier_dim,
    };
    let net = Network::from_parts(spec, params)?;
    Ok((net, meta))
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, CheckpointMeta)> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        DistillError::Config(format!("cannot read checkpoint {}: {e}", path.display()))
    })?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_network;

    fn sample_network() -> Network {
        let spec = NetworkSpec {
            input_dim: 3,
            blocks: vec![BlockSpec::relu_stack(&[4]), BlockSpec::relu_stack(&[5])],
            classifier_dim: 2,
        };
        build_network(&spec, 123).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let net = sample_network();
        let meta = CheckpointMeta {
            seed: 9,
            epoch: 17,
            config_digest: "abc123".into(),
            train_accuracy: 0.97,
            test_accuracy: 0.91,
        };
        let text = render_checkpoint(&net, &meta);
        let (loaded, loaded_meta) = parse_checkpoint(&text).unwrap();
        assert_eq!(loaded.params.content_hash(), net.params.content_hash());
        assert_eq!(loaded_meta, meta);
        // and the re-render is byte identical
        assert_eq!(render_checkpoint(&loaded, &loaded_meta), text);
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let net = sample_network();
        let text = render_checkpoint(&net, &CheckpointMeta::default());
        let bumped = text.replace("format_version 1", "format_version 2");
        assert!(matches!(
            parse_checkpoint(&bumped),
            Err(DistillError::CheckpointVersion { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn corrupted_array_length_is_integrity_error() {
        let net = sample_network();
        let text = render_checkpoint(&net, &CheckpointMeta::default());
        // drop one value from the first param line
        let mut lines: Vec<&str> = text.lines().collect();
        let data_idx = lines.iter().position(|l| l.starts_with("param ")).unwrap() + 1;
        let truncated: String = lines[data_idx]
            .rsplit_once(' ')
            .map(|(head, _)| head.to_string())
            .unwrap();
        let owned = truncated;
        lines[data_idx] = &owned;
        let broken = lines.join("\n") + "\n";
        assert!(matches!(
            parse_checkpoint(&broken),
            Err(DistillError::Integrity(_))
        ));
    }

    #[test]
    fn format_version_constant_is_one() {
        let net = sample_network();
        let text = render_checkpoint(&net, &CheckpointMeta::default());
        assert!(text.starts_with("format_version 1\n"));
    }
}
