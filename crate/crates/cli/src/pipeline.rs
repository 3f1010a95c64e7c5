//! Train, score, select, unlearn and evaluate, shared by every subcommand.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use steinrank::data::{self, SplitPlan};
use steinrank::diffnet::EpochLog;
use steinrank::eval::{self, EvalSplits};
use steinrank::scoring::{self, ScoringOptions};
use steinrank::stein;
use steinrank::unlearn;
use steinrank::{
    Dataset64, DifficultyRanking64, Method, Metric, MlpModel64, ScoreTable64, SgdConfig, SteinKernelMatrix64,
    UnlearnConfig, UnlearnReport64,
};

use crate::config::{DatasetConfig, ExperimentConfig};
use crate::error::{CliError, CliResult};

/// Dataset plus its train/test partition.
pub struct Prepared {
    pub dataset: Dataset64,
    pub plan: SplitPlan,
}

impl Prepared {
    pub fn train_ids(&self) -> Vec<usize> {
        self.plan.train_ids()
    }
}

pub fn load_dataset(cfg: &DatasetConfig) -> CliResult<Dataset64> {
    let ds = match cfg {
        DatasetConfig::Blobs {
            n_per_class,
            centers,
            std,
            seed,
        } => data::make_blobs(*n_per_class, centers, *std, *seed),
        DatasetConfig::Csv { path, label_column } => data::load_csv(path, label_column),
        DatasetConfig::Idx { images, labels } => data::load_idx(images, labels),
    };
    ds.map_err(|e| match e {
        steinrank::Error::Io(io) => CliError::Io(format!("cannot read dataset: {io}")),
        steinrank::Error::Config(msg) => CliError::Config(format!("at `dataset`: {msg}")),
        other => CliError::Core(other),
    })
}

pub fn prepare(cfg: &ExperimentConfig) -> CliResult<Prepared> {
    let mut dataset = load_dataset(&cfg.dataset)?;
    if cfg.standardize {
        dataset = dataset.standardized();
    }
    let spec = &cfg.network;
    if spec.input_dim() != dataset.dim() {
        return Err(CliError::Config(format!(
            "at `network.layer_sizes`: input width {} does not match the {} dataset features",
            spec.input_dim(),
            dataset.dim()
        )));
    }
    if spec.num_classes() < dataset.num_classes() {
        return Err(CliError::Config(format!(
            "at `network.layer_sizes`: {} outputs cannot cover {} classes",
            spec.num_classes(),
            dataset.num_classes()
        )));
    }
    let plan = data::split(dataset.len(), cfg.test_fraction, cfg.split_seed)
        .map_err(|e| CliError::Config(format!("at `test_fraction`: {e}")))?;
    let n_train = plan.retain_ids.len();
    if let Some(&k) = cfg.expansion_ks.last() {
        if k >= n_train {
            return Err(CliError::Config(format!(
                "at `expansion_ks`: {k} exceeds the {} other training samples",
                n_train - 1
            )));
        }
    }
    Ok(Prepared { dataset, plan })
}

pub fn train_base(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64) -> CliResult<(MlpModel64, Vec<EpochLog>)> {
    let train = prepared.dataset.subset(prepared.train_ids())?;
    let sgd = SgdConfig {
        lr: cfg.training.lr,
        epochs: cfg.training.epochs,
        batch_size: cfg.training.batch_size,
        seed,
    };
    let init = MlpModel64::init(cfg.network.clone(), seed)?;
    Ok(init.train_logged(&train, &sgd)?)
}

/// Everything computed from one trained model over the training samples.
pub struct Scored {
    pub table: ScoreTable64,
    pub kernel: Option<SteinKernelMatrix64>,
    pub rankings: Vec<DifficultyRanking64>,
}

impl Scored {
    pub fn ranking(&self, metric: Metric) -> &DifficultyRanking64 {
        self.rankings
            .iter()
            .find(|r| r.metric == metric)
            .expect("ranking computed for every requested metric")
    }
}

pub fn scoring_options(cfg: &ExperimentConfig) -> ScoringOptions {
    ScoringOptions {
        standardization: cfg.standardization,
        entropy_floor: cfg.entropy_floor,
    }
}

pub fn score(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    model: &MlpModel64,
    metrics: &[Metric],
    need_kernel: bool,
) -> CliResult<Scored> {
    let ids = prepared.train_ids();
    let ds = &prepared.dataset;
    let table = stein::score_table(model, ds, &ids)?;
    let kernel = if need_kernel || metrics.iter().any(|m| m.needs_kernel()) {
        let h = stein::median_bandwidth(&stein::gather_features(ds, &ids), ds.dim())?;
        Some(stein::stein_kernel_matrix(ds, &table, h)?)
    } else {
        None
    };
    let labels: Vec<usize> = ids.iter().map(|&id| ds.labels()[id]).collect();
    let opts = scoring_options(cfg);
    let rankings = metrics
        .iter()
        .map(|&m| scoring::score_metric(m, kernel.as_ref(), &table, &labels, &opts))
        .collect::<Result<_, _>>()?;
    Ok(Scored {
        table,
        kernel,
        rankings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum End {
    Easy,
    Difficult,
}

impl End {
    pub fn name(self) -> &'static str {
        match self {
            End::Easy => "easy",
            End::Difficult => "difficult",
        }
    }
}

impl fmt::Display for End {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One cell of the experiment grid. Field order is the row order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RunKey {
    pub seed_index: usize,
    pub metric_index: usize,
    pub end: End,
    /// 0 is the easiest (or hardest) sample of its end.
    pub position: usize,
    pub method_index: usize,
    pub k: usize,
}

/// Serialized result of one unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub metric: String,
    pub target_id: usize,
    pub easy_or_difficult: End,
    pub rank_position: usize,
    pub method: Method,
    pub k_expansion: usize,
    pub forget_ids: Vec<usize>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<UnlearnReport64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    NumericalFailure,
    Error,
}

impl Status {
    pub fn name(self) -> &'static str {
        match self {
            Status::Ok => "ok",
            Status::NumericalFailure => "numerical_failure",
            Status::Error => "error",
        }
    }
}

/// Shared, read-only inputs of every run for one seed.
pub struct RunContext<'a> {
    pub cfg: &'a ExperimentConfig,
    pub prepared: &'a Prepared,
    pub model: &'a MlpModel64,
    pub kernel: Option<&'a SteinKernelMatrix64>,
    pub seed: u64,
}

impl RunContext<'_> {
    /// Union of each target's Stein-similarity expansion, ascending.
    pub fn forget_set(&self, targets: &[usize], k: usize) -> CliResult<Vec<usize>> {
        if k == 0 {
            let mut ids = targets.to_vec();
            ids.sort_unstable();
            ids.dedup();
            return Ok(ids);
        }
        let kernel = self
            .kernel
            .ok_or_else(|| CliError::Config("forget-set expansion needs the Stein kernel matrix".into()))?;
        let mut ids = Vec::new();
        for &t in targets {
            ids.extend(unlearn::expand_forget_set(t, kernel, k)?);
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(ids)
    }

    /// Unlearns `forget` with `method_cfg` and scores the result against `targets`.
    pub fn unlearn_and_evaluate(
        &self,
        targets: &[usize],
        forget: &[usize],
        method_cfg: &UnlearnConfig,
    ) -> steinrank::Result<(unlearn::UnlearnOutcome<f64>, UnlearnReport64)> {
        let ds = &self.prepared.dataset;
        let plan = self.prepared.plan.with_forget(forget)?;
        let splits = EvalSplits {
            targets: ds.subset(targets.to_vec())?,
            forget: ds.subset(plan.forget_ids.clone())?,
            retain: ds.subset(plan.retain_ids.clone())?,
            test: ds.subset(plan.test_ids.clone())?,
        };
        let outcome = unlearn::run(self.model, &splits.forget, &splits.retain, method_cfg, method_seed(self.seed))?;
        let report = checked_verdict(self.cfg, self.model, &outcome, &splits)?;
        Ok((outcome, report))
    }
}

/// Seed handed to unlearning methods whose config sets none. It is derived
/// from the experiment seed but never equal to it, so retraining starts from
/// an initialization independent of the base model's.
pub fn method_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x9E37_79B9_7F4A_7C15)
}

/// Verdict that rejects reports with non-finite measurements.
pub fn checked_verdict(
    cfg: &ExperimentConfig,
    original: &MlpModel64,
    outcome: &unlearn::UnlearnOutcome<f64>,
    splits: &EvalSplits<'_, f64>,
) -> steinrank::Result<UnlearnReport64> {
    let report = eval::verdict(original, outcome, splits, cfg.epsilon, cfg.mia_calibration)?;
    match non_finite_field(&report) {
        Some(field) => Err(steinrank::Error::NonFinite(format!(
            "unlearned model evaluates to a non-finite {field}"
        ))),
        None => Ok(report),
    }
}

/// Parameters can stay finite while their losses overflow; such a run is a
/// numerical failure, not a measurement.
fn non_finite_field(r: &UnlearnReport64) -> Option<&'static str> {
    [
        ("forget_loss", r.forget_loss),
        ("retain_loss", r.retain_loss),
        ("test_loss", r.test_loss),
        ("total_param_distance", r.total_param_distance),
        ("activation_distance", r.activation_distance),
        ("mia_efficacy", r.mia_efficacy),
    ]
    .into_iter()
    .chain(r.layer_distances.iter().map(|&d| ("layer distance", d)))
    .find(|(_, v)| !v.is_finite())
    .map(|(name, _)| name)
}

pub fn status_of(e: &steinrank::Error) -> Status {
    match e {
        steinrank::Error::Numerical { .. } | steinrank::Error::NonFinite(_) => Status::NumericalFailure,
        _ => Status::Error,
    }
}

/// Runs every (metric, end, target, method, k) cell for one seed.
/// Failures are recorded per row and never abort the other runs.
pub fn run_grid(ctx: &RunContext<'_>, seed_index: usize, scored: &Scored) -> Vec<RunRecord> {
    let cfg = ctx.cfg;
    let mut cells = Vec::new();
    for (metric_index, &metric) in cfg.metrics.iter().enumerate() {
        let ranking = scored.ranking(metric);
        let ends = [
            (End::Easy, ranking.easiest(cfg.top_k_each_end).to_vec()),
            (End::Difficult, ranking.hardest(cfg.top_k_each_end)),
        ];
        for (end, targets) in ends {
            for (position, &target) in targets.iter().enumerate() {
                for method_index in 0..cfg.methods.len() {
                    for &k in &cfg.expansion_ks {
                        let key = RunKey {
                            seed_index,
                            metric_index,
                            end,
                            position,
                            method_index,
                            k,
                        };
                        cells.push((key, metric, target));
                    }
                }
            }
        }
    }
    cells.sort_by(|a, b| a.0.cmp(&b.0));
    cells
        .par_iter()
        .map(|(key, metric, target)| {
            let method_cfg = &cfg.methods[key.method_index];
            let method = method_cfg.method;
            let run_id = format!("s{}/{}/{}/{}/{}/k{}", ctx.seed, metric, key.end, target, method, key.k);
            let mut record = RunRecord {
                run_id,
                seed: ctx.seed,
                metric: metric.to_string(),
                target_id: *target,
                easy_or_difficult: key.end,
                rank_position: key.position,
                method,
                k_expansion: key.k,
                forget_ids: Vec::new(),
                status: Status::Ok,
                error: None,
                report: None,
            };
            let forget = match ctx.forget_set(&[*target], key.k) {
                Ok(f) => f,
                Err(e) => {
                    record.status = Status::Error;
                    record.error = Some(e.to_string());
                    return record;
                }
            };
            record.forget_ids = forget.clone();
            match ctx.unlearn_and_evaluate(&[*target], &forget, method_cfg) {
                Ok((_, report)) => record.report = Some(report),
                Err(e) => {
                    record.status = status_of(&e);
                    record.error = Some(e.to_string());
                }
            }
            record
        })
        .collect()
}
