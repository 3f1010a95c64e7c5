//! Subcommand implementations. Each returns the process outcome or an error
//! that maps to exit code 1.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use steinrank::eval::EvalSplits;
use steinrank::scoring;
use steinrank::unlearn::{self, UnlearnOutcome};
use steinrank::{Method, Metric, MlpModel64, UnlearnConfig};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, Outcome};
use crate::pipeline::{self, End, RunContext, RunRecord, Status};
use crate::report;

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub metrics: Option<Vec<Metric>>,
    pub methods: Option<Vec<Method>>,
}

struct Session {
    cfg: ExperimentConfig,
    out: PathBuf,
}

impl Session {
    fn open(args: &CommonArgs) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::load(&args.config)?;
        cfg.override_seed(args.seed);
        cfg.override_metrics(args.metrics.clone())?;
        cfg.override_methods(args.methods.clone())?;
        cfg.validate()?;
        let out = cfg.output_dir(args.out.as_deref())?;
        fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: String) -> PathBuf {
        self.out.join(name)
    }

    fn create(&self, name: String) -> CliResult<BufWriter<File>> {
        let path = self.path(name);
        let f = File::create(&path).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(BufWriter::new(f))
    }

    fn read(&self, name: String, hint: &str) -> CliResult<String> {
        let path = self.path(name);
        fs::read_to_string(&path).map_err(|e| CliError::Io(format!("cannot read {} ({hint}): {e}", path.display())))
    }

    fn write_config(&self) -> CliResult<()> {
        let mut w = self.create("config.json".into())?;
        w.write_all(self.cfg.canonical_json().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    fn save_model(&self, name: String, model: &MlpModel64) -> CliResult<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, model)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    fn load_model(&self, name: String, hint: &str) -> CliResult<MlpModel64> {
        let text = self.read(name.clone(), hint)?;
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("malformed model file {name}: {e}")))
    }
}

pub fn model_file(seed: u64) -> String {
    format!("model_seed{seed}.json")
}

pub fn train_log_file(seed: u64) -> String {
    format!("train_log_seed{seed}.csv")
}

pub fn rankings_file(seed: u64) -> String {
    format!("rankings_seed{seed}.csv")
}

pub fn kernel_file(seed: u64) -> String {
    format!("kernel_seed{seed}.csv")
}

pub fn selection_file(seed: u64) -> String {
    format!("selection_seed{seed}.csv")
}

pub fn manifest_file(seed: u64) -> String {
    format!("unlearn_seed{seed}.json")
}

pub const REPORTS_CSV: &str = "reports.csv";
pub const REPORTS_JSONL: &str = "reports.jsonl";
pub const ACCURACY_TABLE: &str = "accuracy_table.csv";
pub const MIA_TABLE: &str = "mia_table.csv";
pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const EVALUATION_JSONL: &str = "evaluation.jsonl";

const TRAIN_HINT: &str = "run `steinrank train` first";

/// Trains one base model per seed and writes it with its per-epoch log.
pub fn train(args: &CommonArgs) -> CliResult<Outcome> {
    let s = Session::open(args)?;
    let prepared = pipeline::prepare(&s.cfg)?;
    s.write_config()?;
    for &seed in &s.cfg.seeds {
        let (model, log) = pipeline::train_base(&s.cfg, &prepared, seed)?;
        s.save_model(model_file(seed), &model)?;
        report::write_train_log(&log, s.create(train_log_file(seed))?)?;
    }
    Ok(Outcome::Success)
}

/// Scores every training sample under each metric with a previously trained model.
pub fn score(args: &CommonArgs, with_kernel: bool) -> CliResult<Outcome> {
    let s = Session::open(args)?;
    let prepared = pipeline::prepare(&s.cfg)?;
    for &seed in &s.cfg.seeds {
        let model = s.load_model(model_file(seed), TRAIN_HINT)?;
        let scored = pipeline::score(&s.cfg, &prepared, &model, &s.cfg.metrics, with_kernel)?;
        scoring::write_rankings_csv(&scored.rankings, s.create(rankings_file(seed))?)?;
        if with_kernel {
            let kernel = scored.kernel.as_ref().expect("kernel requested");
            kernel.write_csv(s.create(kernel_file(seed))?)?;
        }
    }
    Ok(Outcome::Success)
}

#[derive(Debug, Deserialize)]
struct RankingRow {
    sample_id: usize,
    metric: Metric,
    score: String,
    rank_easy_to_hard: usize,
}

/// Picks the `top_k_each_end` easiest and hardest samples from a rankings file.
pub fn rank(args: &CommonArgs) -> CliResult<Outcome> {
    let s = Session::open(args)?;
    let k = s.cfg.top_k_each_end;
    for &seed in &s.cfg.seeds {
        let text = s.read(rankings_file(seed), "run `steinrank score` first")?;
        let mut by_metric: BTreeMap<Metric, Vec<RankingRow>> = BTreeMap::new();
        for row in csv::Reader::from_reader(text.as_bytes()).deserialize() {
            let row: RankingRow = row?;
            by_metric.entry(row.metric).or_default().push(row);
        }
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(s.create(selection_file(seed))?);
        w.write_record(["metric", "easy_or_difficult", "position", "sample_id", "score"])?;
        for metric in &s.cfg.metrics {
            let mut rows = by_metric
                .remove(metric)
                .ok_or_else(|| CliError::Config(format!("rankings file has no `{metric}` rows")))?;
            rows.sort_by_key(|r| r.rank_easy_to_hard);
            let easy = rows.iter().take(k);
            let difficult = rows.iter().rev().take(k);
            for (end, picked) in [(End::Easy, easy.collect::<Vec<_>>()), (End::Difficult, difficult.collect())] {
                for (pos, r) in picked.into_iter().enumerate() {
                    w.write_record([
                        metric.to_string(),
                        end.to_string(),
                        pos.to_string(),
                        r.sample_id.to_string(),
                        r.score.clone(),
                    ])?;
                }
            }
        }
        w.flush()?;
    }
    Ok(Outcome::Success)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub target_id: usize,
    pub method: UnlearnConfig,
    pub k_expansion: usize,
    pub forget_ids: Vec<usize>,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_taken: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Unlearns each target individually with every configured method.
pub fn unlearn(args: &CommonArgs, targets: &[usize], expand: usize) -> CliResult<Outcome> {
    if targets.is_empty() {
        return Err(CliError::Config("`--targets` needs at least one sample id".into()));
    }
    let s = Session::open(args)?;
    let prepared = pipeline::prepare(&s.cfg)?;
    let train: std::collections::HashSet<usize> = prepared.train_ids().into_iter().collect();
    if let Some(bad) = targets.iter().find(|t| !train.contains(t)) {
        return Err(CliError::Config(format!("target {bad} is not a training sample")));
    }
    let mut failed = false;
    for &seed in &s.cfg.seeds {
        let model = s.load_model(model_file(seed), TRAIN_HINT)?;
        let scored = if expand > 0 {
            Some(pipeline::score(&s.cfg, &prepared, &model, &[], true)?)
        } else {
            None
        };
        let ctx = RunContext {
            cfg: &s.cfg,
            prepared: &prepared,
            model: &model,
            kernel: scored.as_ref().and_then(|sc| sc.kernel.as_ref()),
            seed,
        };
        let mut entries = Vec::new();
        for &target in targets {
            let forget = ctx.forget_set(&[target], expand)?;
            for method_cfg in &s.cfg.methods {
                let mut entry = ManifestEntry {
                    target_id: target,
                    method: method_cfg.clone(),
                    k_expansion: expand,
                    forget_ids: forget.clone(),
                    status: Status::Ok,
                    error: None,
                    model_file: None,
                    steps_taken: None,
                };
                let result = prepared.plan.with_forget(&forget).and_then(|plan| {
                    let ds = &prepared.dataset;
                    let f = ds.subset(plan.forget_ids.clone())?;
                    let r = ds.subset(plan.retain_ids.clone())?;
                    unlearn::run(&model, &f, &r, method_cfg, pipeline::method_seed(seed))
                });
                match result {
                    Ok(outcome) => {
                        let name = format!("unlearned_seed{seed}_{target}_{}_k{expand}.json", method_cfg.method);
                        s.save_model(name.clone(), &outcome.unlearned)?;
                        entry.model_file = Some(name);
                        entry.steps_taken = Some(outcome.steps_taken);
                    }
                    Err(e) => {
                        failed = true;
                        entry.status = pipeline::status_of(&e);
                        entry.error = Some(e.to_string());
                    }
                }
                entries.push(entry);
            }
        }
        let mut w = s.create(manifest_file(seed))?;
        serde_json::to_writer_pretty(&mut w, &Manifest { seed, entries })?;
        w.write_all(b"\n")?;
        w.flush()?;
    }
    Ok(if failed { Outcome::PartialFailure } else { Outcome::Success })
}

/// Evaluates the models listed in each seed's unlearning manifest.
pub fn evaluate(args: &CommonArgs) -> CliResult<Outcome> {
    let s = Session::open(args)?;
    let prepared = pipeline::prepare(&s.cfg)?;
    let ds = &prepared.dataset;
    let mut records = Vec::new();
    for &seed in &s.cfg.seeds {
        let text = s.read(manifest_file(seed), "run `steinrank unlearn` first")?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CliError::Io(format!("malformed manifest: {e}")))?;
        let original = s.load_model(model_file(seed), TRAIN_HINT)?;
        for entry in &manifest.entries {
            let method = entry.method.method;
            let mut record = RunRecord {
                run_id: format!("s{seed}/manual/{}/{method}/k{}", entry.target_id, entry.k_expansion),
                seed,
                metric: "none".into(),
                target_id: entry.target_id,
                easy_or_difficult: End::Easy,
                rank_position: 0,
                method,
                k_expansion: entry.k_expansion,
                forget_ids: entry.forget_ids.clone(),
                status: entry.status,
                error: entry.error.clone(),
                report: None,
            };
            if let (Status::Ok, Some(file)) = (entry.status, &entry.model_file) {
                let unlearned = s.load_model(file.clone(), "listed in the manifest")?;
                let result = prepared.plan.with_forget(&entry.forget_ids).and_then(|plan| {
                    let splits = EvalSplits {
                        targets: ds.subset(vec![entry.target_id])?,
                        forget: ds.subset(plan.forget_ids.clone())?,
                        retain: ds.subset(plan.retain_ids.clone())?,
                        test: ds.subset(plan.test_ids.clone())?,
                    };
                    let outcome = UnlearnOutcome {
                        unlearned,
                        steps_taken: entry.steps_taken.unwrap_or(0),
                        wall_time: 0.0,
                        forget_loss_trace: Vec::new(),
                    };
                    pipeline::checked_verdict(&s.cfg, &original, &outcome, &splits)
                });
                match result {
                    Ok(r) => record.report = Some(r),
                    Err(e) => {
                        record.status = pipeline::status_of(&e);
                        record.error = Some(e.to_string());
                    }
                }
            }
            records.push(record);
        }
    }
    report::write_reports_csv(&records, s.create(EVALUATION_CSV.into())?)?;
    report::write_reports_jsonl(&records, s.create(EVALUATION_JSONL.into())?)?;
    Ok(if report::any_failed(&records) {
        Outcome::PartialFailure
    } else {
        Outcome::Success
    })
}

/// The full protocol: per seed, train, score, select the easiest and hardest
/// targets, unlearn each one with every method and expansion size, evaluate.
pub fn experiment(args: &CommonArgs) -> CliResult<Outcome> {
    let s = Session::open(args)?;
    let prepared = pipeline::prepare(&s.cfg)?;
    s.write_config()?;
    let need_kernel = s.cfg.expansion_ks.iter().any(|&k| k > 0);
    let mut records = Vec::new();
    for (seed_index, &seed) in s.cfg.seeds.iter().enumerate() {
        let (model, log) = pipeline::train_base(&s.cfg, &prepared, seed)?;
        s.save_model(model_file(seed), &model)?;
        report::write_train_log(&log, s.create(train_log_file(seed))?)?;
        let scored = pipeline::score(&s.cfg, &prepared, &model, &s.cfg.metrics, need_kernel)?;
        scoring::write_rankings_csv(&scored.rankings, s.create(rankings_file(seed))?)?;
        let ctx = RunContext {
            cfg: &s.cfg,
            prepared: &prepared,
            model: &model,
            kernel: scored.kernel.as_ref(),
            seed,
        };
        records.extend(pipeline::run_grid(&ctx, seed_index, &scored));
    }
    report::write_reports_csv(&records, s.create(REPORTS_CSV.into())?)?;
    report::write_reports_jsonl(&records, s.create(REPORTS_JSONL.into())?)?;
    report::write_accuracy_table(&records, s.create(ACCURACY_TABLE.into())?)?;
    report::write_mia_table(&records, s.create(MIA_TABLE.into())?)?;
    Ok(if report::any_failed(&records) {
        Outcome::PartialFailure
    } else {
        Outcome::Success
    })
}
