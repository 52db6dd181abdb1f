//! Block-structured dense feed-forward networks with feature taps at every
//! block boundary, plus the cross-stream adaption layers used by the routing
//! pass.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tapegrad::{Tape, Tensor};

use crate::error::{DistillError, Result};
use crate::params::{Bound, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

/// One block: a stack of affine layers, input width inferred from the
/// predecessor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockSpec {
    pub layers: Vec<LayerSpec>,
}

impl BlockSpec {
    pub fn relu_stack(widths: &[usize]) -> BlockSpec {
        BlockSpec {
            layers: widths
                .iter()
                .map(|&w| LayerSpec {
                    width: w,
                    activation: Activation::Relu,
                })
                .collect(),
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|l| l.width).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub blocks: Vec<BlockSpec>,
    pub classifier_dim: usize,
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_dim == 0 {
            problems.push("input_dim must be positive".to_string());
        }
        if self.blocks.is_empty() {
            problems.push("at least one block is required".to_string());
        }
        if self.classifier_dim < 2 {
            problems.push("classifier_dim must be at least 2".to_string());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.layers.is_empty() {
                problems.push(format!("block {i} has no layers"));
            }
            if b.layers.iter().any(|l| l.width == 0) {
                problems.push(format!("block {i} has a zero-width layer"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DistillError::Config(problems.join("; ")))
        }
    }

    /// Number of blocks N.
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Output width of block `i` (0-based).
    pub fn block_width(&self, i: usize) -> usize {
        self.blocks[i].output_width()
    }

    /// Input width of block `i` (0-based).
    pub fn block_input_width(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim
        } else {
            self.blocks[i - 1].output_width()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A block network plus its parameter store.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub mode: Mode,
    // (weight_idx, bias_idx) per layer, blocks flattened in order, classifier last.
    layer_slots: Vec<(usize, usize)>,
    block_layer_ranges: Vec<(usize, usize)>,
}

/// Per-block features and classifier logits from one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub block_features: Vec<Tensor>,
    pub logits: Tensor,
}

/// He-style uniform bound for a layer with the given fan-in.
fn init_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

fn uniform_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let vals: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], vals).expect("sized buffer")
}

/// Builds a network with seeded scaled-uniform weights and zero biases.
pub fn build_network(spec: &NetworkSpec, seed: u64) -> Result<Network> {
    spec.validate()?;
    let mut rng = rand::SeedableRng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let mut layer_slots = Vec::new();
    let mut block_layer_ranges = Vec::new();

    let mut in_width = spec.input_dim;
    for (bi, block) in spec.blocks.iter().enumerate() {
        let start = layer_slots.len();
        for (li, layer) in block.layers.iter().enumerate() {
            let w = uniform_tensor(&mut rng, in_width, layer.width, init_bound(in_width));
            let widx = params.push(format!("block{bi}.layer{li}.weight"), w);
            let bidx = params.push(
                format!("block{bi}.layer{li}.bias"),
                Tensor::zeros(vec![layer.width]),
            );
            layer_slots.push((widx, bidx));
            in_width = layer.width;
        }
        block_layer_ranges.push((start, layer_slots.len()));
    }

    let w = uniform_tensor(&mut rng, in_width, spec.classifier_dim, init_bound(in_width));
    let widx = params.push("classifier.weight", w);
    let bidx = params.push("classifier.bias", Tensor::zeros(vec![spec.classifier_dim]));
    layer_slots.push((widx, bidx));

    Ok(Network {
        spec: spec.clone(),
        params,
        mode: Mode::Train,
        layer_slots,
        block_layer_ranges,
    })
}

impl Network {
    /// Rebuilds the slot bookkeeping for a parameter store loaded from disk.
    pub fn from_parts(spec: NetworkSpec, params: ParamStore) -> Result<Network> {
        let template = build_network(&spec, 0)?;
        if template.params.len() != params.len() {
            return Err(DistillError::Integrity(format!(
                "parameter count {} does not match spec (expected {})",
                params.len(),
                template.params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(DistillError::Integrity(format!(
                    "parameter {} with shape {:?} does not match spec entry {} {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Network {
            spec,
            params,
            mode: Mode::Train,
            layer_slots: template.layer_slots,
            block_layer_ranges: template.block_layer_ranges,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// Freezes all parameters; forward passes stop recording tape nodes.
    pub fn freeze(&mut self) {
        self.params.freeze();
        self.mode = Mode::Eval;
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        self.params.bind(tape)
    }

    pub fn bind_const(&self) -> Bound {
        self.params.bind_const()
    }

    fn layer_forward(
        &self,
        tape: &Tape,
        bound: &Bound,
        slot: usize,
        activation: Activation,
        x: &Tensor,
    ) -> Result<Tensor> {
        let (widx, bidx) = self.layer_slots[slot];
        let h = tape.matmul(x, bound.get(widx))?;
        let h = tape.add_bias(&h, bound.get(bidx))?;
        Ok(match activation {
            Activation::Relu => tape.relu(&h),
            Activation::None => h,
        })
    }

    /// Runs block `i` (0-based) on `x`.
    pub fn block_forward(&self, tape: &Tape, bound: &Bound, i: usize, x: &Tensor) -> Result<Tensor> {
        let (start, end) = self.block_layer_ranges[i];
        let mut h = x.clone();
        for (slot, layer) in (start..end).zip(&self.spec.blocks[i].layers) {
            h = self.layer_forward(tape, bound, slot, layer.activation, &h)?;
        }
        Ok(h)
    }

    /// Classifier logits from the final block feature.
    pub fn classifier_forward(&self, tape: &Tape, bound: &Bound, feat: &Tensor) -> Result<Tensor> {
        let slot = self.layer_slots.len() - 1;
        self.layer_forward(tape, bound, slot, Activation::None, feat)
    }

    /// Full forward pass recording each block output plus the logits.
    pub fn forward_features(&self, tape: &Tape, bound: &Bound, x: &Tensor) -> Result<FeatureBundle> {
        if x.shape().len() != 2 || x.cols() != self.spec.input_dim {
            return Err(DistillError::Tape(tapegrad::Error::BadShape {
                op: "forward_features",
                expected: format!("[batch, {}] input", self.spec.input_dim),
                found: x.shape().to_vec(),
            }));
        }
        let mut features = Vec::with_capacity(self.spec.block_count());
        let mut h = x.clone();
        for i in 0..self.spec.block_count() {
            h = self.block_forward(tape, bound, i, &h)?;
            features.push(h.clone());
        }
        let logits = self.classifier_forward(tape, bound, &h)?;
        Ok(FeatureBundle {
            block_features: features,
            logits,
        })
    }

    /// Convenience eval-mode forward with constant parameters.
    pub fn infer(&self, x: &Tensor) -> Result<FeatureBundle> {
        let tape = Tape::new();
        let bound = self.bind_const();
        self.forward_features(&tape, &bound, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdaptDirection {
    /// teacher width -> student width
    TeacherToStudent,
    /// student width -> teacher width
    StudentToTeacher,
}

/// Affine maps aligning teacher and student feature widths at every spot,
/// in both directions. They train under the routing loss only.
#[derive(Debug, Clone)]
pub struct AdaptionSet {
    pub params: ParamStore,
    spots: usize,
    // (ts_weight, ts_bias, st_weight, st_bias) per spot
    slots: Vec<(usize, usize, usize, usize)>,
}

impl AdaptionSet {
    /// Builds maps for every spot 1..=N, both directions, seeded.
    pub fn build(teacher: &NetworkSpec, student: &NetworkSpec, seed: u64) -> Result<AdaptionSet> {
        if teacher.block_count() != student.block_count() {
            return Err(DistillError::Config(format!(
                "teacher has {} blocks but student has {}; block granularity must match",
                teacher.block_count(),
                student.block_count()
            )));
        }
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut slots = Vec::new();
        for i in 0..teacher.block_count() {
            let tw = teacher.block_width(i);
            let sw = student.block_width(i);
            let spot = i + 1;
            let ts_w = params.push(
                format!("spot{spot}.ts.weight"),
                uniform_tensor(&mut rng, tw, sw, init_bound(tw)),
            );
            let ts_b = params.push(format!("spot{spot}.ts.bias"), Tensor::zeros(vec![sw]));
            let st_w = params.push(
                format!("spot{spot}.st.weight"),
                uniform_tensor(&mut rng, sw, tw, init_bound(sw)),
            );
            let st_b = params.push(format!("spot{spot}.st.bias"), Tensor::zeros(vec![tw]));
            slots.push((ts_w, ts_b, st_w, st_b));
        }
        Ok(AdaptionSet {
            params,
            spots: teacher.block_count(),
            slots,
        })
    }

    /// Identity-initialized maps; valid only when widths coincide at every spot.
    pub fn identity(teacher: &NetworkSpec, student: &NetworkSpec) -> Result<AdaptionSet> {
        let mut set = AdaptionSet::build(teacher, student, 0)?;
        for i in 0..set.spots {
            let (ts_w, _, st_w, _) = set.slots[i];
            for idx in [ts_w, st_w] {
                let p = set.params.get_mut(idx);
                let (r, c) = (p.value.shape()[0], p.value.shape()[1]);
                if r != c {
                    return Err(DistillError::Config(format!(
                        "identity adaption needs equal widths at spot {}, got {r} vs {c}",
                        i + 1
                    )));
                }
                let vals = p.value.values_mut();
                vals.iter_mut().for_each(|v| *v = 0.0);
                for d in 0..r {
                    vals[d * c + d] = 1.0;
                }
            }
        }
        Ok(set)
    }

    pub fn spot_count(&self) -> usize {
        self.spots
    }

    pub fn bind(&self, tape: &Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Applies the adaption map for `spot` (1-based) in `direction`.
    pub fn adapt(
        &self,
        tape: &Tape,
        bound: &Bound,
        spot: usize,
        direction: AdaptDirection,
        feat: &Tensor,
    ) -> Result<Tensor> {
        if spot == 0 || spot > self.spots {
            return Err(DistillError::Config(format!(
                "unknown adaption spot {spot} (valid: 1..={})",
                self.spots
            )));
        }
        let (ts_w, ts_b, st_w, st_b) = self.slots[spot - 1];
        let (widx, bidx) = match direction {
            AdaptDirection::TeacherToStudent => (ts_w, ts_b),
            AdaptDirection::StudentToTeacher => (st_w, st_b),
        };
        let h = tape.matmul(feat, bound.get(widx))?;
        Ok(tape.add_bias(&h, bound.get(bidx))?)
    }
}
