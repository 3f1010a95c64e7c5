//! Unlearning procedures: gradient ascent, fine-tuning, Fisher forgetting and
//! retraining from scratch, plus Stein-similarity expansion of a forget set.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Subset;
use crate::diffnet::{MlpModel, NetworkSpec, SgdConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stein::SteinKernelMatrix;

/// Added to the Fisher diagonal before inversion.
pub const FISHER_DAMPING: f64 = 1e-8;

const FISHER_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    GradAscent,
    FineTune,
    Fisher,
    Retrain,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::GradAscent, Method::FineTune, Method::Fisher, Method::Retrain];

    pub fn name(self) -> &'static str {
        match self {
            Method::GradAscent => "grad_ascent",
            Method::FineTune => "fine_tune",
            Method::Fisher => "fisher",
            Method::Retrain => "retrain",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown unlearning method `{s}`")))
    }
}

/// Settings for one unlearning run. `overfit_threshold` is read by gradient
/// ascent only and `alpha` by Fisher forgetting only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub method: Method,
    #[serde(default)]
    pub lr: f64,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overfit_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Falls back to the seed passed to `run` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_batch_size() -> usize {
    32
}

impl UnlearnConfig {
    /// Reference settings for a small image classifier.
    pub fn defaults_for(method: Method) -> Self {
        let base = Self {
            method,
            lr: 0.1,
            epochs: 10,
            overfit_threshold: None,
            alpha: None,
            batch_size: default_batch_size(),
            seed: None,
        };
        match method {
            Method::GradAscent => Self {
                lr: 1e-4,
                epochs: 50,
                overfit_threshold: Some(5.0),
                ..base
            },
            Method::Fisher => Self {
                alpha: Some(1e-5),
                ..base
            },
            Method::FineTune | Method::Retrain => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let needs_lr = self.method != Method::Fisher;
        if needs_lr && !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("{}: lr must be positive, got {}", self.method, self.lr)));
        }
        if needs_lr && self.batch_size == 0 {
            return Err(Error::Config(format!("{}: batch_size must be positive", self.method)));
        }
        match self.method {
            Method::GradAscent => match self.overfit_threshold {
                Some(t) if t >= 0.0 && t.is_finite() => Ok(()),
                Some(t) => Err(Error::Config(format!("grad_ascent: overfit_threshold must be nonnegative, got {t}"))),
                None => Err(Error::Config("grad_ascent: overfit_threshold is required".into())),
            },
            Method::Fisher => match self.alpha {
                Some(a) if a >= 0.0 && a.is_finite() => Ok(()),
                Some(a) => Err(Error::Config(format!("fisher: alpha must be nonnegative, got {a}"))),
                None => Err(Error::Config("fisher: alpha is required".into())),
            },
            Method::FineTune | Method::Retrain => Ok(()),
        }
    }

    fn sgd(&self, seed: u64) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }
}

/// Result of one unlearning run.
#[derive(Debug, Clone)]
pub struct UnlearnOutcome<F> {
    pub unlearned: MlpModel<F>,
    pub steps_taken: usize,
    pub wall_time: f64,
    /// Mean forget-set NLL before each ascent step and after the last one.
    /// Empty for methods other than gradient ascent.
    pub forget_loss_trace: Vec<F>,
}

fn sgd_steps(n: usize, cfg: &SgdConfig) -> usize {
    cfg.epochs * n.div_ceil(cfg.batch_size)
}

/// Full-batch ascent on the forget-set NLL until it reaches the overfit
/// threshold or `epochs` steps have been taken.
pub fn grad_ascent<F: Scalar>(model: &MlpModel<F>, forget: &Subset<'_, F>, cfg: &UnlearnConfig) -> Result<UnlearnOutcome<F>> {
    cfg.validate()?;
    if forget.is_empty() {
        return Err(Error::Argument("gradient ascent needs a nonempty forget set".into()));
    }
    let start = Instant::now();
    let threshold = F::lit(cfg.overfit_threshold.expect("validated"));
    let lr = F::lit(cfg.lr);
    let mut current = model.clone();
    let mut trace = Vec::new();
    let mut steps = 0;
    loop {
        let (loss, grad) = current.loss_and_grad(forget.iter())?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                last_finite_step: steps,
                message: "forget loss became non-finite".into(),
            });
        }
        trace.push(loss);
        if loss >= threshold || steps == cfg.epochs {
            break;
        }
        // Descending along the negated gradient is ascent on the loss.
        current.descend(&grad, -lr).map_err(|_| Error::Numerical {
            last_finite_step: steps,
            message: "gradient ascent diverged".into(),
        })?;
        steps += 1;
    }
    Ok(UnlearnOutcome {
        unlearned: current,
        steps_taken: steps,
        wall_time: start.elapsed().as_secs_f64(),
        forget_loss_trace: trace,
    })
}

/// Continues SGD on the retain set only.
pub fn fine_tune<F: Scalar>(
    model: &MlpModel<F>,
    retain: &Subset<'_, F>,
    cfg: &UnlearnConfig,
    seed: u64,
) -> Result<UnlearnOutcome<F>> {
    cfg.validate()?;
    let start = Instant::now();
    let sgd = cfg.sgd(cfg.seed.unwrap_or(seed));
    let unlearned = model.train(retain, &sgd)?;
    Ok(UnlearnOutcome {
        unlearned,
        steps_taken: sgd_steps(retain.len(), &sgd),
        wall_time: start.elapsed().as_secs_f64(),
        forget_loss_trace: Vec::new(),
    })
}

/// Diagonal of the empirical Fisher information: mean squared per-sample NLL gradient.
pub fn fisher_diagonal<F: Scalar>(model: &MlpModel<F>, retain: &Subset<'_, F>) -> Result<Vec<F>> {
    if retain.is_empty() {
        return Err(Error::Argument("Fisher diagonal needs a nonempty retain set".into()));
    }
    let p = model.params().len();
    let positions: Vec<usize> = (0..retain.len()).collect();
    let partials: Vec<Vec<F>> = positions
        .par_chunks(FISHER_CHUNK)
        .map(|chunk| {
            let mut acc = vec![F::zero(); p];
            for &k in chunk {
                let g = model.grad_params([retain.get(k)])?;
                for (a, gi) in acc.iter_mut().zip(g) {
                    *a = *a + gi * gi;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![F::zero(); p];
    for part in partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t = *t + v;
        }
    }
    let n = F::from_usize_lossy(retain.len());
    Ok(total.into_iter().map(|v| v / n).collect())
}

/// Per-parameter noise scale `sqrt(alpha / (fisher + damping))`.
pub fn fisher_sigmas<F: Scalar>(fisher: &[F], alpha: F) -> Vec<F> {
    let damping = F::lit(FISHER_DAMPING);
    fisher.iter().map(|&f| (alpha / (f + damping)).sqrt()).collect()
}

/// Adds Gaussian noise scaled inversely to each parameter's Fisher information.
pub fn fisher_forget<F: Scalar>(
    model: &MlpModel<F>,
    retain: &Subset<'_, F>,
    alpha: F,
    seed: u64,
) -> Result<UnlearnOutcome<F>> {
    if !(alpha >= F::zero()) || !alpha.is_finite() {
        return Err(Error::Config(format!("fisher: alpha must be nonnegative, got {alpha}")));
    }
    let start = Instant::now();
    let fisher = fisher_diagonal(model, retain)?;
    if alpha == F::zero() {
        return Ok(UnlearnOutcome {
            unlearned: model.clone(),
            steps_taken: 0,
            wall_time: start.elapsed().as_secs_f64(),
            forget_loss_trace: Vec::new(),
        });
    }
    let sigmas = fisher_sigmas(&fisher, alpha);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = model
        .params()
        .iter()
        .zip(&sigmas)
        .map(|(&p, &s)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            p + s * F::lit(z)
        })
        .collect();
    Ok(UnlearnOutcome {
        unlearned: model.with_params(params)?,
        steps_taken: 1,
        wall_time: start.elapsed().as_secs_f64(),
        forget_loss_trace: Vec::new(),
    })
}

/// Fresh initialization and training on the retain set only.
pub fn retrain<F: Scalar>(
    spec: &NetworkSpec,
    retain: &Subset<'_, F>,
    cfg: &UnlearnConfig,
    seed: u64,
) -> Result<UnlearnOutcome<F>> {
    cfg.validate()?;
    let start = Instant::now();
    let seed = cfg.seed.unwrap_or(seed);
    let sgd = cfg.sgd(seed);
    let unlearned = MlpModel::init(spec.clone(), seed)?.train(retain, &sgd)?;
    Ok(UnlearnOutcome {
        unlearned,
        steps_taken: sgd_steps(retain.len(), &sgd),
        wall_time: start.elapsed().as_secs_f64(),
        forget_loss_trace: Vec::new(),
    })
}

/// Dispatches on `cfg.method`. `seed` is used when the config carries none.
/// Only gradient ascent reads `forget`; every other method reads `retain` only.
pub fn run<F: Scalar>(
    model: &MlpModel<F>,
    forget: &Subset<'_, F>,
    retain: &Subset<'_, F>,
    cfg: &UnlearnConfig,
    seed: u64,
) -> Result<UnlearnOutcome<F>> {
    cfg.validate()?;
    match cfg.method {
        Method::GradAscent => grad_ascent(model, forget, cfg),
        Method::FineTune => fine_tune(model, retain, cfg, seed),
        Method::Fisher => fisher_forget(model, retain, F::lit(cfg.alpha.expect("validated")), cfg.seed.unwrap_or(seed)),
        Method::Retrain => retrain(model.spec(), retain, cfg, seed),
    }
}

/// `target` plus the `k` samples with the largest Stein kernel value against
/// it, ties to the smaller id. Returned in ascending id order.
pub fn expand_forget_set<F: Scalar>(target: usize, m: &SteinKernelMatrix<F>, k: usize) -> Result<Vec<usize>> {
    let pos = m
        .position(target)
        .ok_or_else(|| Error::Argument(format!("target {target} is not covered by the kernel matrix")))?;
    if k >= m.len() {
        return Err(Error::Argument(format!(
            "expansion size {k} exceeds the {} other samples",
            m.len().saturating_sub(1)
        )));
    }
    let row = m.row(pos);
    let ids = m.sample_ids();
    let mut others: Vec<usize> = (0..m.len()).filter(|&j| j != pos).collect();
    others.sort_by(|&a, &b| {
        row[b]
            .partial_cmp(&row[a])
            .expect("finite kernel values")
            .then(ids[a].cmp(&ids[b]))
    });
    let mut set: Vec<usize> = std::iter::once(target).chain(others[..k].iter().map(|&j| ids[j])).collect();
    set.sort_unstable();
    Ok(set)
}
