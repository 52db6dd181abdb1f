//! Synthetic classification datasets (Gaussian blobs, spiral arms) and a CSV
//! loader, all with deterministic seeded generation and a stratified 80/20
//! split.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use tapegrad::Tensor;

use crate::error::{DistillError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Blobs,
    Spirals,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub seed: u64,
    /// Source file for `kind = "csv"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes < 2 {
            problems.push(format!("classes must be ≥ 2, got {}", self.classes));
        }
        if self.input_dim == 0 {
            problems.push("input_dim must be positive".into());
        }
        if self.kind != DatasetKind::Csv && self.samples_per_class < 10 {
            problems.push(format!(
                "samples_per_class must be ≥ 10, got {}",
                self.samples_per_class
            ));
        }
        if self.noise < 0.0 {
            problems.push(format!("noise must be non-negative, got {}", self.noise));
        }
        if self.kind == DatasetKind::Csv && self.path.is_none() {
            problems.push("csv datasets require a path".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(DistillError::Config(problems.join("; ")))
        }
    }
}

/// A labeled dataset already split into train and test parts.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x_train: Tensor,
    pub y_train: Vec<usize>,
    pub x_test: Tensor,
    pub y_test: Vec<usize>,
    pub input_dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.y_train.len()
    }

    pub fn test_len(&self) -> usize {
        self.y_test.len()
    }
}

/// Extracts the given rows of a `[n, d]` tensor into a new constant tensor.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let d = x.cols();
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        out.extend_from_slice(&x.values()[i * d..(i + 1) * d]);
    }
    Tensor::new(vec![idx.len(), d], out).expect("sized buffer")
}

/// Generates (or loads) a dataset according to the spec, stratified 80/20.
pub fn gen_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let (samples, labels) = match spec.kind {
        DatasetKind::Blobs => gen_blobs(spec, &mut rng),
        DatasetKind::Spirals => gen_spirals(spec, &mut rng),
        DatasetKind::Csv => {
            let path = spec.path.as_ref().expect("validated");
            return load_csv(Path::new(path), spec, seed);
        }
    };
    let mut ds = split_stratified(samples, labels, spec, &mut rng);
    standardize(&mut ds);
    Ok(ds)
}

/// Scales every feature to zero mean and unit variance, with statistics taken
/// from the train split only.
fn standardize(ds: &mut Dataset) {
    let d = ds.input_dim;
    let n = ds.train_len().max(1) as f64;
    let train = ds.x_train.values();
    let mut mean = vec![0.0; d];
    for r in 0..ds.train_len() {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += train[r * d + j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; d];
    for r in 0..ds.train_len() {
        for (j, s) in std.iter_mut().enumerate() {
            let diff = train[r * d + j] - mean[j];
            *s += diff * diff;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n).sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }
    for x in [&mut ds.x_train, &mut ds.x_test] {
        let rows = x.rows();
        let vals = x.values_mut();
        for r in 0..rows {
            for j in 0..d {
                vals[r * d + j] = (vals[r * d + j] - mean[j]) / std[j];
            }
        }
    }
}

fn gen_blobs(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let d = spec.input_dim;
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(samples.capacity());
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let point: Vec<f64> = center
                .iter()
                .map(|&m| m + spec.noise * rng.sample::<f64, _>(StandardNormal))
                .collect();
            samples.push(point);
            labels.push(c);
        }
    }
    (samples, labels)
}

fn gen_spirals(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    // Interleaved 2-D arms lifted into input_dim by a seeded linear embedding.
    let d = spec.input_dim;
    let embed: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut samples = Vec::with_capacity(spec.classes * spec.samples_per_class);
    let mut labels = Vec::with_capacity(samples.capacity());
    for c in 0..spec.classes {
        let offset = 2.0 * std::f64::consts::PI * c as f64 / spec.classes as f64;
        for i in 0..spec.samples_per_class {
            let t = (i as f64 + 1.0) / spec.samples_per_class as f64;
            let radius = 3.0 * t;
            let angle = offset + 3.0 * std::f64::consts::PI * t;
            let p0 = radius * angle.cos() + spec.noise * rng.sample::<f64, _>(StandardNormal);
            let p1 = radius * angle.sin() + spec.noise * rng.sample::<f64, _>(StandardNormal);
            let point: Vec<f64> = (0..d).map(|j| p0 * embed[j] + p1 * embed[d + j]).collect();
            samples.push(point);
            labels.push(c);
        }
    }
    (samples, labels)
}

/// Stratified 80/20 split with per-class shuffling.
fn split_stratified(
    samples: Vec<Vec<f64>>,
    labels: Vec<usize>,
    spec: &DatasetSpec,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); spec.classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class_indices in &mut by_class {
        class_indices.shuffle(rng);
        let cut = (class_indices.len() * 4) / 5;
        train_idx.extend_from_slice(&class_indices[..cut]);
        test_idx.extend_from_slice(&class_indices[cut..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let d = spec.input_dim;
    let build = |idx: &[usize]| {
        let mut vals = Vec::with_capacity(idx.len() * d);
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            vals.extend_from_slice(&samples[i]);
            ys.push(labels[i]);
        }
        (
            Tensor::new(vec![idx.len(), d], vals).expect("sized buffer"),
            ys,
        )
    };
    let (x_train, y_train) = build(&train_idx);
    let (x_test, y_test) = build(&test_idx);
    Dataset {
        x_train,
        y_train,
        x_test,
        y_test,
        input_dim: d,
        classes: spec.classes,
    }
}

/// Serializes a dataset to CSV. The leading `split` column survives reload so
/// the exact split is reproducible from the file alone.
pub fn dataset_to_csv(ds: &Dataset) -> String {
    let d = ds.input_dim;
    let mut out = String::from("split,label");
    for j in 0..d {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    let mut write_rows = |x: &Tensor, y: &[usize], split: &str| {
        for (r, &label) in y.iter().enumerate() {
            out.push_str(split);
            out.push(',');
            out.push_str(&label.to_string());
            for v in &x.values()[r * d..(r + 1) * d] {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
    };
    write_rows(&ds.x_train, &ds.y_train, "train");
    write_rows(&ds.x_test, &ds.y_test, "test");
    out
}

/// Loads tabular data. Accepts either this crate's `split,label,f0..` layout
/// or a plain `label,f0..` file, which is then split 80/20 stratified with
/// `seed`.
pub fn load_csv(path: &Path, spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        DistillError::Config(format!("cannot read csv dataset {}: {e}", path.display()))
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DistillError::Config("empty csv dataset".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    let has_split = cols.first() == Some(&"split");
    let label_col = usize::from(has_split);
    let feature_cols = cols.len() - label_col - 1;
    if feature_cols != spec.input_dim {
        return Err(DistillError::Config(format!(
            "csv has {feature_cols} feature columns but config expects {}",
            spec.input_dim
        )));
    }

    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut splits = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(DistillError::Config(format!(
                "csv line {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                cols.len()
            )));
        }
        if has_split {
            splits.push(fields[0].to_string());
        }
        let label: usize = fields[label_col].parse().map_err(|_| {
            DistillError::Config(format!("bad label on csv line {}", lineno + 2))
        })?;
        if label >= spec.classes {
            return Err(DistillError::Config(format!(
                "label {label} on line {} exceeds class count {}",
                lineno + 2,
                spec.classes
            )));
        }
        let feats: Vec<f64> = fields[label_col + 1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| DistillError::Config(format!("bad feature on csv line {}", lineno + 2)))?;
        labels.push(label);
        samples.push(feats);
    }

    if has_split {
        let d = spec.input_dim;
        let build = |want: &str| {
            let mut vals = Vec::new();
            let mut ys = Vec::new();
            for (i, s) in splits.iter().enumerate() {
                if s == want {
                    vals.extend_from_slice(&samples[i]);
                    ys.push(labels[i]);
                }
            }
            let rows = ys.len();
            (Tensor::new(vec![rows, d], vals).expect("sized buffer"), ys)
        };
        let (x_train, y_train) = build("train");
        let (x_test, y_test) = build("test");
        Ok(Dataset {
            x_train,
            y_train,
            x_test,
            y_test,
            input_dim: d,
            classes: spec.classes,
        })
    } else {
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        Ok(split_stratified(samples, labels, spec, &mut rng))
    }
}
