//! Stein kernels over an RBF base kernel and kernelized Stein discrepancy.
//!
//! For base kernel `k(a, b) = exp(-|a - b|^2 / (2 h^2))`, scores `s_a`, `s_b`
//! and `delta = a - b`, the Stein kernel used throughout is
//!
//! ```text
//! kappa = k * ( s_a.s_b + s_a.delta / h^2 - s_b.delta / h^2 + d / h^2 - |delta|^2 / h^4 )
//! ```
//!
//! The last two terms are the trace of the cross Hessian of `k`. Labels never
//! enter the kernel directly; they only shape the score `grad_x log p(y | x)`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::diffnet::MlpModel;
use crate::error::{Error, Result};
use crate::scalar::{dot, norm, sq_dist, Scalar};

/// Per-sample model quantities the difficulty metrics are built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ScoreTable<F> {
    pub sample_ids: Vec<usize>,
    pub dim: usize,
    pub num_classes: usize,
    /// Row `i` is `grad_x log p(y_i | x_i)`, row-major `n x dim`.
    pub input_scores: Vec<F>,
    /// `|grad_theta log p(y_i | x_i)|_2`.
    pub param_grad_norms: Vec<F>,
    /// Row `i` is the predicted distribution for sample `i`, row-major `n x num_classes`.
    pub probs: Vec<F>,
}

impl<F: Scalar> ScoreTable<F> {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }

    pub fn score(&self, i: usize) -> &[F] {
        &self.input_scores[i * self.dim..(i + 1) * self.dim]
    }

    pub fn probs_row(&self, i: usize) -> &[F] {
        &self.probs[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let checks = [
            ("input score matrix", n * self.dim, self.input_scores.len()),
            ("parameter gradient norms", n, self.param_grad_norms.len()),
            ("probability matrix", n * self.num_classes, self.probs.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::Shape { what, expected, got });
            }
        }
        let finite = self
            .input_scores
            .iter()
            .chain(&self.param_grad_norms)
            .chain(&self.probs)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite("score table entry".into()));
        }
        if self.param_grad_norms.iter().any(|&v| v < F::zero()) {
            return Err(Error::Data("negative gradient norm".into()));
        }
        Ok(())
    }
}

/// Dense symmetric `n x n` matrix of Stein kernel values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct SteinKernelMatrix<F> {
    values: Vec<F>,
    n: usize,
    bandwidth: F,
    sample_ids: Vec<usize>,
}

impl<F: Scalar> SteinKernelMatrix<F> {
    /// Builds a matrix from explicit row-major values, e.g. for hand-set examples.
    pub fn from_values(values: Vec<F>, bandwidth: F, sample_ids: Vec<usize>) -> Result<Self> {
        let n = sample_ids.len();
        if values.len() != n * n {
            return Err(Error::Shape {
                what: "kernel matrix",
                expected: n * n,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel matrix entry".into()));
        }
        Ok(Self {
            values,
            n,
            bandwidth,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn bandwidth(&self) -> F {
        self.bandwidth
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    /// Position of `id` in [`Self::sample_ids`].
    pub fn position(&self, id: usize) -> Option<usize> {
        self.sample_ids.iter().position(|&s| s == id)
    }

    /// Row-major CSV; the header lists the sample ids.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(self.sample_ids.iter().map(|id| id.to_string()))?;
        for i in 0..self.n {
            w.write_record(self.row(i).iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Median of the pairwise Euclidean distances between rows of a row-major
/// `n x dim` matrix. A zero median falls back to the smallest nonzero distance.
pub fn median_bandwidth<F: Scalar>(features: &[F], dim: usize) -> Result<F> {
    if dim == 0 || !features.len().is_multiple_of(dim) {
        return Err(Error::Argument("feature matrix shape does not match dimension".into()));
    }
    let n = features.len() / dim;
    if n < 2 {
        return Err(Error::Argument(format!("median bandwidth needs at least 2 points, got {n}")));
    }
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let mut dists: Vec<F> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(row(i), row(j)).sqrt())
        .collect();
    dists.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        (dists[m / 2 - 1] + dists[m / 2]) / F::lit(2.0)
    };
    if median > F::zero() {
        return Ok(median);
    }
    dists
        .into_iter()
        .find(|&d| d > F::zero())
        .ok_or_else(|| Error::DegenerateData("all points are identical".into()))
}

fn check_bandwidth<F: Scalar>(h: F) -> Result<()> {
    if !(h > F::zero()) || !h.is_finite() {
        return Err(Error::Config(format!("kernel bandwidth must be positive, got {h}")));
    }
    Ok(())
}

/// Gaussian RBF kernel `exp(-|a - b|^2 / (2 h^2))`.
pub fn rbf<F: Scalar>(a: &[F], b: &[F], h: F) -> Result<F> {
    check_bandwidth(h)?;
    if a.len() != b.len() {
        return Err(Error::Shape {
            what: "rbf argument",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(rbf_unchecked(a, b, h))
}

fn rbf_unchecked<F: Scalar>(a: &[F], b: &[F], h: F) -> F {
    (-sq_dist(a, b) / (F::lit(2.0) * h * h)).exp()
}

/// Closed-form Stein kernel for the RBF base kernel.
pub fn stein_kernel<F: Scalar>(a: &[F], b: &[F], s_a: &[F], s_b: &[F], h: F) -> Result<F> {
    check_bandwidth(h)?;
    let d = a.len();
    for (what, v) in [("second point", b), ("first score", s_a), ("second score", s_b)] {
        if v.len() != d {
            return Err(Error::Shape {
                what,
                expected: d,
                got: v.len(),
            });
        }
    }
    Ok(stein_kernel_unchecked(a, b, s_a, s_b, h))
}

fn stein_kernel_unchecked<F: Scalar>(a: &[F], b: &[F], s_a: &[F], s_b: &[F], h: F) -> F {
    let h2 = h * h;
    let mut r2 = F::zero();
    let mut sa_delta = F::zero();
    let mut sb_delta = F::zero();
    for i in 0..a.len() {
        let delta = a[i] - b[i];
        r2 = r2 + delta * delta;
        sa_delta = sa_delta + s_a[i] * delta;
        sb_delta = sb_delta + s_b[i] * delta;
    }
    let k = (-r2 / (F::lit(2.0) * h2)).exp();
    let d = F::from_usize_lossy(a.len());
    k * (dot(s_a, s_b) + (sa_delta - sb_delta) / h2 + d / h2 - r2 / (h2 * h2))
}

/// Scores, parameter-gradient norms and predicted distributions for `ids`.
pub fn score_table<F: Scalar>(model: &MlpModel<F>, ds: &LabeledDataset<F>, ids: &[usize]) -> Result<ScoreTable<F>> {
    if ds.dim() != model.spec().input_dim() {
        return Err(Error::Shape {
            what: "dataset feature dimension",
            expected: model.spec().input_dim(),
            got: ds.dim(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= ds.len()) {
        return Err(Error::Argument(format!("sample id {bad} out of range")));
    }
    let rows: Vec<(Vec<F>, F, Vec<F>)> = ids
        .par_iter()
        .map(|&id| {
            let (x, y) = ds.sample(id);
            let trace = model.forward(x)?;
            let score = model.grad_input_with_trace(x, y, &trace);
            // The norm of grad(log p) equals the norm of grad(NLL).
            let g = model.grad_params([(x, y)])?;
            Ok((score, norm(&g), trace.probs))
        })
        .collect::<Result<_>>()?;
    let mut table = ScoreTable {
        sample_ids: ids.to_vec(),
        dim: ds.dim(),
        num_classes: model.spec().num_classes(),
        input_scores: Vec::with_capacity(ids.len() * ds.dim()),
        param_grad_norms: Vec::with_capacity(ids.len()),
        probs: Vec::with_capacity(ids.len() * model.spec().num_classes()),
    };
    for (score, g, probs) in rows {
        table.input_scores.extend(score);
        table.param_grad_norms.push(g);
        table.probs.extend(probs);
    }
    table.validate()?;
    Ok(table)
}

/// Stein kernel matrix over points given with their scores directly.
/// Used for analytic densities, independent of any model.
pub fn stein_kernel_matrix_from_scores<F: Scalar>(
    points: &[F],
    scores: &[F],
    dim: usize,
    h: F,
    sample_ids: Vec<usize>,
) -> Result<SteinKernelMatrix<F>> {
    check_bandwidth(h)?;
    let n = sample_ids.len();
    for (what, v) in [("point matrix", points), ("score matrix", scores)] {
        if v.len() != n * dim {
            return Err(Error::Shape {
                what,
                expected: n * dim,
                got: v.len(),
            });
        }
    }
    fn row<F>(m: &[F], i: usize, dim: usize) -> &[F] {
        &m[i * dim..(i + 1) * dim]
    }
    let upper: Vec<Vec<F>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    stein_kernel_unchecked(
                        row(points, i, dim),
                        row(points, j, dim),
                        row(scores, i, dim),
                        row(scores, j, dim),
                        h,
                    )
                })
                .collect()
        })
        .collect();
    let mut values = vec![F::zero(); n * n];
    for (i, upper_row) in upper.into_iter().enumerate() {
        for (offset, v) in upper_row.into_iter().enumerate() {
            let j = i + offset;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    SteinKernelMatrix::from_values(values, h, sample_ids)
}

/// Stein kernel matrix over the samples of `table`, with features from `ds`.
pub fn stein_kernel_matrix<F: Scalar>(ds: &LabeledDataset<F>, table: &ScoreTable<F>, h: F) -> Result<SteinKernelMatrix<F>> {
    table.validate()?;
    if table.dim != ds.dim() {
        return Err(Error::Shape {
            what: "score dimension",
            expected: ds.dim(),
            got: table.dim,
        });
    }
    let points: Vec<F> = table
        .sample_ids
        .iter()
        .flat_map(|&id| ds.features(id).iter().copied())
        .collect();
    stein_kernel_matrix_from_scores(&points, &table.input_scores, table.dim, h, table.sample_ids.clone())
}

/// Features of `ids`, gathered row-major.
pub fn gather_features<F: Scalar>(ds: &LabeledDataset<F>, ids: &[usize]) -> Vec<F> {
    ids.iter().flat_map(|&id| ds.features(id).iter().copied()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KsdMode {
    /// Off-diagonal mean, unbiased.
    UStat,
    /// Mean over all entries including the diagonal.
    VStat,
}

pub fn ksd_statistic<F: Scalar>(m: &SteinKernelMatrix<F>, mode: KsdMode) -> Result<F> {
    let n = m.len();
    match mode {
        KsdMode::VStat => {
            if n == 0 {
                return Err(Error::Argument("empty kernel matrix".into()));
            }
            let total: F = m.values.iter().copied().sum();
            Ok(total / F::from_usize_lossy(n * n))
        }
        KsdMode::UStat => {
            if n < 2 {
                return Err(Error::Argument("u-statistic needs at least 2 samples".into()));
            }
            let total: F = (0..n)
                .map(|i| {
                    m.row(i)
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, &v)| v)
                        .sum::<F>()
                })
                .sum();
            Ok(total / F::from_usize_lossy(n * (n - 1)))
        }
    }
}
