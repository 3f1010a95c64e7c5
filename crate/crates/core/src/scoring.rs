//! Per-sample unlearning-difficulty metrics and deterministic ranking.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stein::{ScoreTable, SteinKernelMatrix};

pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Row sum of the Stein kernel.
    Mksd,
    /// Row sum of exponentiated, standardized Stein kernel values.
    Msksd,
    /// Norm of the parameter-space score.
    Ssn,
    /// MSKSD divided by predictive entropy.
    Emsksd,
    /// Predicted probability of the true label.
    Pc,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Mksd, Metric::Msksd, Metric::Ssn, Metric::Emsksd, Metric::Pc];

    pub fn orientation(self) -> Orientation {
        match self {
            Metric::Ssn => Orientation::HigherIsEasier,
            Metric::Mksd | Metric::Msksd | Metric::Emsksd | Metric::Pc => Orientation::HigherIsHarder,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mksd => "mksd",
            Metric::Msksd => "msksd",
            Metric::Ssn => "ssn",
            Metric::Emsksd => "emsksd",
            Metric::Pc => "pc",
        }
    }

    /// Whether computing the metric needs the Stein kernel matrix.
    pub fn needs_kernel(self) -> bool {
        matches!(self, Metric::Mksd | Metric::Msksd | Metric::Emsksd)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    HigherIsHarder,
    HigherIsEasier,
}

/// How kernel values are brought to a common scale before exponentiation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardization {
    /// Each anchor row is z-scored on its own.
    #[default]
    PerRow,
    /// One mean and deviation over the whole matrix.
    Global,
}

/// Knobs shared by the kernel-based metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringOptions {
    pub standardization: Standardization,
    pub entropy_floor: f64,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            standardization: Standardization::PerRow,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
        }
    }
}

/// Scores for one metric together with the easy-to-hard order of sample ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct DifficultyRanking<F> {
    pub metric: Metric,
    pub orientation: Orientation,
    pub sample_ids: Vec<usize>,
    pub scores: Vec<F>,
    pub easy_to_hard: Vec<usize>,
}

impl<F: Scalar> DifficultyRanking<F> {
    /// The `k` easiest sample ids, easiest first.
    pub fn easiest(&self, k: usize) -> &[usize] {
        &self.easy_to_hard[..k.min(self.easy_to_hard.len())]
    }

    /// The `k` hardest sample ids, hardest first.
    pub fn hardest(&self, k: usize) -> Vec<usize> {
        self.easy_to_hard.iter().rev().take(k).copied().collect()
    }

    /// 0-based position of every entry of `sample_ids` in the easy-to-hard order.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos_by_id = std::collections::HashMap::with_capacity(self.easy_to_hard.len());
        for (p, &id) in self.easy_to_hard.iter().enumerate() {
            pos_by_id.insert(id, p);
        }
        self.sample_ids.iter().map(|id| pos_by_id[id]).collect()
    }
}

/// Row sums of the kernel matrix, diagonal included.
pub fn mksd<F: Scalar>(m: &SteinKernelMatrix<F>) -> Vec<F> {
    (0..m.len()).map(|i| m.row(i).iter().copied().sum()).collect()
}

/// Population z-score of a row. `sample_id` is only used for error reporting.
pub fn standardize_row<F: Scalar>(row: &[F], sample_id: usize) -> Result<Vec<F>> {
    if row.len() < 2 {
        return Err(Error::Argument("standardization needs at least 2 values".into()));
    }
    if row.iter().all(|&v| v == row[0]) {
        return Err(Error::DegenerateRow { sample_id });
    }
    let n = F::from_usize_lossy(row.len());
    let mean = row.iter().copied().sum::<F>() / n;
    let sd = (row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n).sqrt();
    if !(sd > F::zero()) {
        return Err(Error::DegenerateRow { sample_id });
    }
    Ok(row.iter().map(|&v| (v - mean) / sd).collect())
}

pub fn msksd<F: Scalar>(m: &SteinKernelMatrix<F>) -> Result<Vec<F>> {
    msksd_with(m, Standardization::PerRow)
}

pub fn msksd_with<F: Scalar>(m: &SteinKernelMatrix<F>, standardization: Standardization) -> Result<Vec<F>> {
    match standardization {
        Standardization::PerRow => (0..m.len())
            .map(|i| {
                let z = standardize_row(m.row(i), m.sample_ids()[i])?;
                Ok(z.into_iter().map(F::exp).sum())
            })
            .collect(),
        Standardization::Global => {
            let z = standardize_row(m.values(), m.sample_ids().first().copied().unwrap_or(0))?;
            let n = m.len();
            Ok((0..n).map(|i| z[i * n..(i + 1) * n].iter().map(|v| v.exp()).sum()).collect())
        }
    }
}

pub fn ssn<F: Scalar>(table: &ScoreTable<F>) -> Vec<F> {
    table.param_grad_norms.clone()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy<F: Scalar>(probs: &[F]) -> Result<F> {
    let tol = F::lit(1e-6).max(F::epsilon() * F::lit(1e3));
    let total: F = probs.iter().copied().sum();
    if probs.is_empty() || probs.iter().any(|&p| !(p >= F::zero()) || p > F::one()) || (total - F::one()).abs() > tol {
        return Err(Error::Argument("entropy input is not a probability vector".into()));
    }
    Ok(probs
        .iter()
        .filter(|&&p| p > F::zero())
        .map(|&p| -p * p.ln())
        .sum::<F>()
        .max(F::zero()))
}

/// MSKSD over `max(entropy, floor)` per sample.
pub fn emsksd<F: Scalar>(msksd_scores: &[F], table: &ScoreTable<F>, entropy_floor: F) -> Result<Vec<F>> {
    if !(entropy_floor > F::zero()) {
        return Err(Error::Config(format!("entropy floor must be positive, got {entropy_floor}")));
    }
    if msksd_scores.len() != table.len() {
        return Err(Error::Shape {
            what: "msksd scores",
            expected: table.len(),
            got: msksd_scores.len(),
        });
    }
    msksd_scores
        .iter()
        .enumerate()
        .map(|(i, &s)| Ok(s / entropy(table.probs_row(i))?.max(entropy_floor)))
        .collect()
}

/// Predicted probability of the true label.
pub fn pc<F: Scalar>(table: &ScoreTable<F>, labels: &[usize]) -> Result<Vec<F>> {
    if labels.len() != table.len() {
        return Err(Error::Shape {
            what: "labels",
            expected: table.len(),
            got: labels.len(),
        });
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            table.probs_row(i).get(y).copied().ok_or(Error::Label {
                label: y,
                classes: table.num_classes,
            })
        })
        .collect()
}

/// Sorts `sample_ids` from easiest to hardest; ties go to the smaller id.
pub fn rank<F: Scalar>(
    metric: Metric,
    scores: Vec<F>,
    sample_ids: Vec<usize>,
    orientation: Orientation,
) -> Result<DifficultyRanking<F>> {
    if scores.len() != sample_ids.len() {
        return Err(Error::Shape {
            what: "scores",
            expected: sample_ids.len(),
            got: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Data(format!("{metric} score of sample {} is not finite", sample_ids[i])));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = match orientation {
            Orientation::HigherIsHarder => scores[a].partial_cmp(&scores[b]),
            Orientation::HigherIsEasier => scores[b].partial_cmp(&scores[a]),
        }
        .expect("finite scores");
        by_score.then(sample_ids[a].cmp(&sample_ids[b]))
    });
    let easy_to_hard = order.into_iter().map(|i| sample_ids[i]).collect();
    Ok(DifficultyRanking {
        metric,
        orientation,
        sample_ids,
        scores,
        easy_to_hard,
    })
}

/// Computes and ranks one metric. `kernel` is required for the kernel-based
/// metrics and must cover the same samples, in the same order, as `table`.
pub fn score_metric<F: Scalar>(
    metric: Metric,
    kernel: Option<&SteinKernelMatrix<F>>,
    table: &ScoreTable<F>,
    labels: &[usize],
    opts: &ScoringOptions,
) -> Result<DifficultyRanking<F>> {
    let kernel = || -> Result<&SteinKernelMatrix<F>> {
        let m = kernel.ok_or_else(|| Error::Argument(format!("{metric} needs a Stein kernel matrix")))?;
        if m.sample_ids() != table.sample_ids.as_slice() {
            return Err(Error::Consistency("kernel matrix and score table cover different samples".into()));
        }
        Ok(m)
    };
    let scores = match metric {
        Metric::Mksd => mksd(kernel()?),
        Metric::Msksd => msksd_with(kernel()?, opts.standardization)?,
        Metric::Ssn => ssn(table),
        Metric::Emsksd => emsksd(&msksd_with(kernel()?, opts.standardization)?, table, F::lit(opts.entropy_floor))?,
        Metric::Pc => pc(table, labels)?,
    };
    rank(metric, scores, table.sample_ids.clone(), metric.orientation())
}

/// Rankings as CSV with columns `sample_id,metric,score,rank_easy_to_hard`.
pub fn write_rankings_csv<F: Scalar, W: Write>(rankings: &[DifficultyRanking<F>], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["sample_id", "metric", "score", "rank_easy_to_hard"])?;
    for r in rankings {
        for ((id, score), pos) in r.sample_ids.iter().zip(&r.scores).zip(r.positions()) {
            w.write_record([id.to_string(), r.metric.to_string(), score.to_string(), pos.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
