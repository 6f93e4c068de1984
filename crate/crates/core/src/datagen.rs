//! Synthetic non-iid task generation and client partitioning.
//!
//! The base task is a Gaussian mixture: one spherical Gaussian per class,
//! class means evenly spaced on a circle in the first two coordinates, every
//! other coordinate pure noise. Covariate shift rotates the first two
//! coordinates; label shift keeps a subset of classes with their global
//! indices intact.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Adjacent class means are this many standard deviations apart by default.
pub const DEFAULT_CLASS_SEPARATION: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample<F> {
    pub features: Vec<F>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset<F> {
    pub samples: Vec<Sample<F>>,
    pub n_classes: usize,
}

impl<F: Scalar> Dataset<F> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Feature dimensionality, taken from the first sample.
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// How one cluster's distribution differs from the base task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Shift {
    Rotation(f64),
    Labels(BTreeSet<usize>),
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shift::Rotation(deg) => write!(f, "{deg}"),
            Shift::Labels(set) => {
                let parts: Vec<String> = set.iter().map(|c| c.to_string()).collect();
                write!(f, "{}", parts.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub shift: Shift,
    pub clients: usize,
}

/// Ordered list of clusters. Client ids are assigned contiguously in this order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLayout {
    pub clusters: Vec<ClusterSpec>,
}

impl ClusterLayout {
    pub fn new(clusters: Vec<ClusterSpec>) -> Self {
        Self { clusters }
    }

    pub fn total_clients(&self) -> usize {
        self.clusters.iter().map(|c| c.clients).sum()
    }

    /// Ground-truth cluster id for every client, in client-id order.
    pub fn cluster_ids(&self) -> Vec<usize> {
        self.clusters
            .iter()
            .enumerate()
            .flat_map(|(c, spec)| std::iter::repeat_n(c, spec.clients))
            .collect()
    }

    /// Checks the layout against a client count and class count, collecting every problem.
    pub fn validate(&self, k: usize, n_classes: usize) -> Vec<String> {
        let mut problems = Vec::new();
        if self.clusters.is_empty() {
            problems.push("layout has no clusters".to_string());
        }
        let total = self.total_clients();
        if total != k {
            problems.push(format!("layout `{self}` assigns {total} clients but K = {k}"));
        }
        for (c, spec) in self.clusters.iter().enumerate() {
            if spec.clients == 0 {
                problems.push(format!("layout cluster {c} has zero clients"));
            }
            match &spec.shift {
                Shift::Rotation(deg) => {
                    if !(0.0..360.0).contains(deg) {
                        problems.push(format!("layout cluster {c}: rotation {deg} outside [0, 360)"));
                    }
                }
                Shift::Labels(set) => {
                    if set.is_empty() {
                        problems.push(format!("layout cluster {c}: empty label subset"));
                    }
                    if let Some(bad) = set.iter().find(|&&l| l >= n_classes) {
                        problems.push(format!("layout cluster {c}: label {bad} outside 0..{n_classes}"));
                    }
                }
            }
        }
        problems
    }
}

impl fmt::Display for ClusterLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .clusters
            .iter()
            .map(|c| format!("{}:{}", c.shift, c.clients))
            .collect();
        write!(f, "{}", parts.join(", "))
    }
}

/// Positions of a shard's samples in the pool it was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardSource {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard<F> {
    pub client_id: usize,
    pub cluster_id: usize,
    pub train: Dataset<F>,
    pub val: Dataset<F>,
    pub test: Dataset<F>,
    pub source: ShardSource,
}

/// Gaussian-mixture task with the default class separation.
pub fn generate_base_task<F: Scalar>(
    n_classes: usize,
    dim: usize,
    n_samples: usize,
    rng_seed: u64,
) -> Result<Dataset<F>> {
    generate_base_task_with(n_classes, dim, n_samples, DEFAULT_CLASS_SEPARATION, rng_seed)
}

/// Gaussian-mixture task; `class_separation` is the distance between adjacent
/// class means in units of the (unit) per-coordinate standard deviation.
pub fn generate_base_task_with<F: Scalar>(
    n_classes: usize,
    dim: usize,
    n_samples: usize,
    class_separation: f64,
    rng_seed: u64,
) -> Result<Dataset<F>> {
    let mut problems = Vec::new();
    if n_classes < 2 {
        problems.push(format!("n_classes must be >= 2, got {n_classes}"));
    }
    if dim < 2 {
        problems.push(format!("dim must be >= 2, got {dim}"));
    }
    if n_samples < n_classes {
        problems.push(format!("n_samples ({n_samples}) must be >= n_classes ({n_classes})"));
    }
    if !(class_separation.is_finite() && class_separation > 0.0) {
        problems.push(format!("class separation must be positive, got {class_separation}"));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }

    let radius = class_separation / (2.0 * (std::f64::consts::PI / n_classes as f64).sin());
    let means: Vec<(f64, f64)> = (0..n_classes)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / n_classes as f64;
            (radius * angle.cos(), radius * angle.sin())
        })
        .collect();

    let mut rng = rng::seeded(rng_seed);
    let samples = (0..n_samples)
        .map(|n| {
            let label = n % n_classes;
            let (mx, my) = means[label];
            let features = (0..dim)
                .map(|d| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let mean = match d {
                        0 => mx,
                        1 => my,
                        _ => 0.0,
                    };
                    F::lit(mean + noise)
                })
                .collect();
            Sample { features, label }
        })
        .collect();
    Ok(Dataset { samples, n_classes })
}

/// Rotates the first two coordinates of every sample counter-clockwise.
pub fn apply_rotation<F: Scalar>(dataset: &Dataset<F>, degrees: f64) -> Result<Dataset<F>> {
    if dataset.dim() < 2 && !dataset.is_empty() {
        return Err(Error::config(format!(
            "rotation needs feature dim >= 2, got {}",
            dataset.dim()
        )));
    }
    if degrees == 0.0 {
        return Ok(dataset.clone());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let samples = dataset
        .samples
        .iter()
        .map(|s| {
            let mut features = s.features.clone();
            let x = s.features[0].as_f64();
            let y = s.features[1].as_f64();
            features[0] = F::lit(cos * x - sin * y);
            features[1] = F::lit(sin * x + cos * y);
            Sample {
                features,
                label: s.label,
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        n_classes: dataset.n_classes,
    })
}

/// Keeps only samples whose label is in `label_subset`. Labels keep their global index.
pub fn apply_label_shift<F: Scalar>(dataset: &Dataset<F>, label_subset: &BTreeSet<usize>) -> Result<Dataset<F>> {
    if label_subset.is_empty() {
        return Err(Error::config("label subset is empty"));
    }
    let samples: Vec<_> = dataset
        .samples
        .iter()
        .filter(|s| label_subset.contains(&s.label))
        .cloned()
        .collect();
    if samples.is_empty() {
        return Err(Error::config(format!(
            "label subset {label_subset:?} selects no samples"
        )));
    }
    Ok(Dataset {
        samples,
        n_classes: dataset.n_classes,
    })
}

/// Splits a pool into per-client shards following `layout`.
///
/// Every sample of the pool is used at most once across all clients. For
/// label-shift clusters only samples with an allowed label are eligible.
/// Rotation is applied after the draw, so the shard holds samples from the
/// cluster's shifted distribution.
pub fn partition_clients<F: Scalar>(
    dataset: &Dataset<F>,
    layout: &ClusterLayout,
    train_n: usize,
    val_n: usize,
    test_n: usize,
    rng_seed: u64,
) -> Result<Vec<ClientShard<F>>> {
    let problems = layout.validate(layout.total_clients(), dataset.n_classes);
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if train_n == 0 || val_n == 0 || test_n == 0 {
        return Err(Error::config(format!(
            "shard sizes must be positive (train {train_n}, val {val_n}, test {test_n})"
        )));
    }
    let per_client = train_n + val_n + test_n;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::seeded(rng_seed));
    let mut used = vec![false; dataset.len()];

    let mut shards = Vec::with_capacity(layout.total_clients());
    let mut client_id = 0;
    for (cluster_id, spec) in layout.clusters.iter().enumerate() {
        let needed = spec.clients * per_client;
        let eligible: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&idx| !used[idx])
            .filter(|&idx| match &spec.shift {
                Shift::Labels(set) => set.contains(&dataset.samples[idx].label),
                Shift::Rotation(_) => true,
            })
            .take(needed)
            .collect();
        if eligible.len() < needed {
            return Err(Error::config(format!(
                "cluster {cluster_id} (`{}`) needs {needed} samples but only {} are available",
                spec.shift,
                eligible.len()
            )));
        }
        for &idx in &eligible {
            used[idx] = true;
        }

        for chunk in eligible.chunks(per_client) {
            let (train_idx, rest) = chunk.split_at(train_n);
            let (val_idx, test_idx) = rest.split_at(val_n);
            let take = |idx: &[usize]| -> Result<Dataset<F>> {
                let raw = Dataset {
                    samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
                    n_classes: dataset.n_classes,
                };
                match &spec.shift {
                    Shift::Rotation(deg) => apply_rotation(&raw, *deg),
                    Shift::Labels(set) => apply_label_shift(&raw, set),
                }
            };
            shards.push(ClientShard {
                client_id,
                cluster_id,
                train: take(train_idx)?,
                val: take(val_idx)?,
                test: take(test_idx)?,
                source: ShardSource {
                    train: train_idx.to_vec(),
                    val: val_idx.to_vec(),
                    test: test_idx.to_vec(),
                },
            });
            client_id += 1;
        }
    }
    Ok(shards)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::ingestion(
                self.path,
                Some(self.pos as u64),
                format!("truncated file while reading {what}"),
            )
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn payload(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos + len;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| {
            Error::ingestion(
                self.path,
                Some(self.bytes.len() as u64),
                format!("truncated payload: expected {len} bytes from offset {}", self.pos),
            )
        })?;
        self.pos = end;
        Ok(chunk)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801).
/// Pixels are scaled to `[0, 1]` and each image is flattened row-major.
pub fn load_idx<F: Scalar>(images_path: &Path, labels_path: &Path) -> Result<Dataset<F>> {
    let image_bytes = read_file(images_path)?;
    let mut images = IdxReader {
        path: images_path,
        bytes: &image_bytes,
        pos: 0,
    };
    let magic = images.u32("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::ingestion(
            images_path,
            Some(0),
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n_images = images.u32("image count")? as usize;
    let rows = images.u32("row count")? as usize;
    let cols = images.u32("column count")? as usize;
    let pixels_per_image = rows * cols;
    let pixels = images.payload(n_images * pixels_per_image)?;

    let label_bytes = read_file(labels_path)?;
    let mut labels = IdxReader {
        path: labels_path,
        bytes: &label_bytes,
        pos: 0,
    };
    let magic = labels.u32("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::ingestion(
            labels_path,
            Some(0),
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n_labels = labels.u32("label count")? as usize;
    if n_labels != n_images {
        return Err(Error::ingestion(
            labels_path,
            Some(4),
            format!("label count {n_labels} does not match image count {n_images}"),
        ));
    }
    let label_values = labels.payload(n_labels)?;

    let scale = F::lit(255.0);
    let samples: Vec<Sample<F>> = pixels
        .chunks(pixels_per_image.max(1))
        .take(n_images)
        .zip(label_values)
        .map(|(img, &label)| Sample {
            features: img.iter().map(|&p| F::lit(p as f64) / scale).collect(),
            label: label as usize,
        })
        .collect();
    let n_classes = label_values.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    Ok(Dataset { samples, n_classes })
}
