//! Labeled datasets, synthetic blob generation, CSV/IDX loaders and
//! train/retain/forget/test bookkeeping.

use std::collections::HashSet;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Per-sample read counters. Every feature or label lookup through the
/// dataset bumps the counter of the sample it touches.
#[derive(Debug)]
struct AccessLog(Arc<[AtomicU64]>);

impl AccessLog {
    fn new(n: usize) -> Self {
        Self((0..n).map(|_| AtomicU64::new(0)).collect())
    }

    fn hit(&self, id: usize) {
        self.0[id].fetch_add(1, Ordering::Relaxed);
    }
}

/// Row-major `n x d` feature matrix with integer labels in `[0, num_classes)`.
/// Sample ids are the row indices `0..n`.
#[derive(Debug)]
pub struct LabeledDataset<F> {
    features: Vec<F>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
    reads: AccessLog,
}

impl<F: Scalar> Clone for LabeledDataset<F> {
    /// Clones data; the copy starts with fresh access counters.
    fn clone(&self) -> Self {
        Self {
            features: self.features.clone(),
            dim: self.dim,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            reads: AccessLog::new(self.labels.len()),
        }
    }
}

impl<F: Scalar> LabeledDataset<F> {
    pub fn new(features: Vec<F>, dim: usize, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if dim == 0 {
            return Err(Error::Argument("feature dimension must be at least 1".into()));
        }
        if features.len() != n * dim {
            return Err(Error::Shape {
                what: "feature matrix",
                expected: n * dim,
                got: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Label {
                label,
                classes: num_classes,
            });
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "feature {} of sample {}",
                pos % dim,
                pos / dim
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
            reads: AccessLog::new(n),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ids(&self) -> std::ops::Range<usize> {
        0..self.len()
    }

    /// Feature row of sample `id`. Counts as an access.
    pub fn features(&self, id: usize) -> &[F] {
        self.reads.hit(id);
        &self.features[id * self.dim..(id + 1) * self.dim]
    }

    /// Label of sample `id`. Counts as an access.
    pub fn label(&self, id: usize) -> usize {
        self.reads.hit(id);
        self.labels[id]
    }

    /// Feature row and label together; counts as a single access.
    pub fn sample(&self, id: usize) -> (&[F], usize) {
        self.reads.hit(id);
        (&self.features[id * self.dim..(id + 1) * self.dim], self.labels[id])
    }

    /// Labels of all samples without touching the access counters.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn access_count(&self, id: usize) -> u64 {
        self.reads.0[id].load(Ordering::Relaxed)
    }

    pub fn reset_access_counts(&self) {
        for c in self.reads.0.iter() {
            c.store(0, Ordering::Relaxed);
        }
    }

    /// Per-feature z-scoring. Constant features are centered only.
    pub fn standardized(&self) -> Self {
        let n = F::from_usize_lossy(self.len());
        let mut out = self.features.clone();
        for j in 0..self.dim {
            let col = self.features.iter().skip(j).step_by(self.dim);
            let mean = col.clone().copied().sum::<F>() / n;
            let var = col.map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let sd = var.sqrt();
            for v in out.iter_mut().skip(j).step_by(self.dim) {
                *v = if sd > F::zero() { (*v - mean) / sd } else { *v - mean };
            }
        }
        Self {
            features: out,
            dim: self.dim,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            reads: AccessLog::new(self.len()),
        }
    }

    /// Subset view over `ids` in the given order.
    pub fn subset(&self, ids: impl Into<Vec<usize>>) -> Result<Subset<'_, F>> {
        Subset::new(self, ids.into())
    }
}

/// An ordered selection of samples from a dataset. All reads go through the
/// parent dataset's access counters.
#[derive(Debug, Clone)]
pub struct Subset<'a, F> {
    data: &'a LabeledDataset<F>,
    ids: Vec<usize>,
}

impl<'a, F: Scalar> Subset<'a, F> {
    pub fn new(data: &'a LabeledDataset<F>, ids: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= data.len()) {
            return Err(Error::Argument(format!(
                "sample id {bad} out of range for dataset of {} samples",
                data.len()
            )));
        }
        Ok(Self { data, ids })
    }

    pub fn dataset(&self) -> &'a LabeledDataset<F> {
        self.data
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// The `k`-th member as `(features, label)`.
    pub fn get(&self, k: usize) -> (&'a [F], usize) {
        self.data.sample(self.ids[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'a [F], usize)> + '_ {
        self.ids.iter().map(move |&id| self.data.sample(id))
    }
}

/// Disjoint retain / forget / test id sets. Retain keeps the training order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub retain_ids: Vec<usize>,
    pub forget_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

impl SplitPlan {
    /// Checks disjointness and, when `n` is given, that the three sets cover `0..n`.
    pub fn validate(&self, n: Option<usize>) -> Result<()> {
        let mut seen = HashSet::new();
        for &id in self.retain_ids.iter().chain(&self.forget_ids).chain(&self.test_ids) {
            if !seen.insert(id) {
                return Err(Error::Consistency(format!("sample {id} appears in more than one split")));
            }
        }
        if let Some(n) = n {
            if seen.len() != n || seen.iter().any(|&id| id >= n) {
                return Err(Error::Consistency(format!(
                    "splits cover {} ids, expected exactly 0..{n}",
                    seen.len()
                )));
            }
        }
        Ok(())
    }

    /// All training ids: retain followed by forget.
    pub fn train_ids(&self) -> Vec<usize> {
        let mut ids = self.retain_ids.clone();
        ids.extend(&self.forget_ids);
        ids.sort_unstable();
        ids
    }

    /// Re-partitions the training ids so that `forget` becomes the forget set.
    /// Retain preserves the relative order of the current training ids.
    pub fn with_forget(&self, forget: &[usize]) -> Result<SplitPlan> {
        let train = self.train_ids();
        let train_set: HashSet<usize> = train.iter().copied().collect();
        let forget_set: HashSet<usize> = forget.iter().copied().collect();
        if forget_set.len() != forget.len() {
            return Err(Error::Argument("forget ids contain duplicates".into()));
        }
        if let Some(bad) = forget.iter().find(|id| !train_set.contains(id)) {
            return Err(Error::Argument(format!("forget id {bad} is not a training sample")));
        }
        let plan = SplitPlan {
            retain_ids: train.into_iter().filter(|id| !forget_set.contains(id)).collect(),
            forget_ids: forget.to_vec(),
            test_ids: self.test_ids.clone(),
        };
        plan.validate(None)?;
        Ok(plan)
    }
}

/// Gaussian clusters: class `c` is drawn from `N(centers[c], std^2 I)`.
pub fn make_blobs<F: Scalar>(
    n_per_class: usize,
    centers: &[Vec<F>],
    std: F,
    seed: u64,
) -> Result<LabeledDataset<F>> {
    if centers.len() < 2 {
        return Err(Error::Config("make_blobs needs at least 2 centers".into()));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be positive".into()));
    }
    if !(std > F::zero()) || !std.is_finite() {
        return Err(Error::Config(format!("blob std must be positive, got {std}")));
    }
    let dim = centers[0].len();
    if dim == 0 {
        return Err(Error::Config("blob centers must have at least one coordinate".into()));
    }
    if let Some(c) = centers.iter().find(|c| c.len() != dim) {
        return Err(Error::Shape {
            what: "blob center",
            expected: dim,
            got: c.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(centers.len() * n_per_class * dim);
    let mut labels = Vec::with_capacity(centers.len() * n_per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &mu in center {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(mu + std * F::lit(z));
            }
            labels.push(class);
        }
    }
    LabeledDataset::new(features, dim, labels, centers.len())
}

/// Reads a headed CSV file. Every column except `label_column` is a feature.
/// Rows in errors are 1-based data rows (the header is not counted).
pub fn load_csv<F: Scalar>(path: impl AsRef<Path>, label_column: &str) -> Result<LabeledDataset<F>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::Schema(format!("missing label column `{label_column}`")))?;
    let dim = headers.len() - 1;
    if dim == 0 {
        return Err(Error::Schema("no feature columns".into()));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                row,
                column: "*".into(),
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if j == label_idx {
                let label: usize = cell.parse().map_err(|_| Error::Parse {
                    row,
                    column: headers[j].to_string(),
                    message: format!("label `{cell}` is not a nonnegative integer"),
                })?;
                labels.push(label);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    row,
                    column: headers[j].to_string(),
                    message: format!("`{cell}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        column: headers[j].to_string(),
                        message: format!("non-finite value `{cell}`"),
                    });
                }
                features.push(F::lit(v));
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(features, dim, labels, num_classes)
}

fn read_be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Length(format!("{what}: header truncated at byte {offset}")))
}

/// Parses an IDX image file and IDX label file pair from memory.
pub fn parse_idx<F: Scalar>(images: &[u8], labels: &[u8]) -> Result<LabeledDataset<F>> {
    let magic = read_be_u32(images, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let magic = read_be_u32(labels, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = read_be_u32(images, 4, "images")? as usize;
    let rows = read_be_u32(images, 8, "images")? as usize;
    let cols = read_be_u32(images, 12, "images")? as usize;
    let n_labels = read_be_u32(labels, 4, "labels")? as usize;
    if n != n_labels {
        return Err(Error::Consistency(format!("{n} images but {n_labels} labels")));
    }
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() != n * dim {
        return Err(Error::Length(format!(
            "images payload has {} bytes, header declares {}",
            pixels.len(),
            n * dim
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(Error::Length(format!(
            "labels payload has {} bytes, header declares {n}",
            label_bytes.len()
        )));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let scale = F::lit(255.0);
    let features = pixels.iter().map(|&p| F::from_u8(p).unwrap() / scale).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    LabeledDataset::new(features, dim, labels, num_classes)
}

pub fn load_idx<F: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset<F>> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Seeded shuffle-and-cut into train (as retain) and test. Forget starts empty.
pub fn split(n: usize, test_fraction: f64, seed: u64) -> Result<SplitPlan> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!("test_fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test < 1 || n_test >= n {
        return Err(Error::Config(format!(
            "test_fraction {test_fraction} leaves {n_test} of {n} samples for testing"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut test_ids = ids[..n_test].to_vec();
    let mut retain_ids = ids[n_test..].to_vec();
    test_ids.sort_unstable();
    retain_ids.sort_unstable();
    let plan = SplitPlan {
        retain_ids,
        forget_ids: Vec::new(),
        test_ids,
    };
    plan.validate(Some(n))?;
    Ok(plan)
}
