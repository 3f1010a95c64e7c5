//! CSV and JSON-lines writers for run reports and their aggregates.

use std::collections::BTreeMap;
use std::io::Write;

use steinrank::diffnet::EpochLog;
use steinrank::UnlearnReport64;

use crate::error::CliResult;
use crate::pipeline::{End, RunRecord, Status};

pub const REPORT_COLUMNS: [&str; 18] = [
    "run_id",
    "metric",
    "target_id",
    "easy_or_difficult",
    "method",
    "k_expansion",
    "forget_acc",
    "retain_acc",
    "test_acc",
    "forget_loss",
    "retain_loss",
    "test_loss",
    "total_param_distance",
    "activation_distance",
    "mia_efficacy",
    "steps_taken",
    "success",
    "status",
];

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

fn report_fields(r: Option<&UnlearnReport64>) -> Vec<String> {
    match r {
        Some(r) => vec![
            r.forget_acc.to_string(),
            r.retain_acc.to_string(),
            r.test_acc.to_string(),
            r.forget_loss.to_string(),
            r.retain_loss.to_string(),
            r.test_loss.to_string(),
            r.total_param_distance.to_string(),
            r.activation_distance.to_string(),
            r.mia_efficacy.to_string(),
            r.steps_taken.to_string(),
            r.success.to_string(),
        ],
        None => vec![String::new(); 11],
    }
}

/// One row per run; failed runs keep their identifying columns and leave the
/// measurements empty.
pub fn write_reports_csv<W: Write>(records: &[RunRecord], out: W) -> CliResult<()> {
    let mut w = writer(out);
    w.write_record(REPORT_COLUMNS)?;
    for rec in records {
        let mut row = vec![
            rec.run_id.clone(),
            rec.metric.clone(),
            rec.target_id.to_string(),
            rec.easy_or_difficult.to_string(),
            rec.method.to_string(),
            rec.k_expansion.to_string(),
        ];
        row.extend(report_fields(rec.report.as_ref()));
        row.push(rec.status.name().to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_reports_jsonl<W: Write>(records: &[RunRecord], mut out: W) -> CliResult<()> {
    for rec in records {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_reports_jsonl(text: &str) -> CliResult<Vec<RunRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn write_train_log<W: Write>(log: &[EpochLog], out: W) -> CliResult<()> {
    let mut w = writer(out);
    w.write_record(["epoch", "train_loss", "train_acc"])?;
    for e in log {
        w.write_record([e.epoch.to_string(), e.train_loss.to_string(), e.train_acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

type GroupKey = (u64, String, End, String, usize);

/// Groups records by (seed, metric, end, method, k), keeping first-seen order.
fn groups(records: &[RunRecord]) -> Vec<(GroupKey, Vec<&RunRecord>)> {
    let mut order: Vec<GroupKey> = Vec::new();
    let mut members: BTreeMap<GroupKey, Vec<&RunRecord>> = BTreeMap::new();
    for rec in records {
        let key = (
            rec.seed,
            rec.metric.clone(),
            rec.easy_or_difficult,
            rec.method.to_string(),
            rec.k_expansion,
        );
        if !members.contains_key(&key) {
            order.push(key.clone());
        }
        members.entry(key).or_default().push(rec);
    }
    order
        .into_iter()
        .map(|k| {
            let v = members.remove(&k).expect("group recorded");
            (k, v)
        })
        .collect()
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Mean accuracies and losses over the targets of each group: the
/// easy/difficult x method grid, one block per seed, metric and expansion size.
pub fn write_accuracy_table<W: Write>(records: &[RunRecord], out: W) -> CliResult<()> {
    let mut w = writer(out);
    w.write_record([
        "seed",
        "metric",
        "easy_or_difficult",
        "method",
        "k_expansion",
        "runs",
        "ok_runs",
        "forget_acc",
        "retain_acc",
        "test_acc",
        "forget_loss",
        "retain_loss",
        "test_loss",
        "success_rate",
    ])?;
    for ((seed, metric, end, method, k), recs) in groups(records) {
        let ok: Vec<&UnlearnReport64> = recs.iter().filter_map(|r| r.report.as_ref()).collect();
        let col = |f: fn(&UnlearnReport64) -> f64| fmt_opt(mean(&ok.iter().map(|r| f(r)).collect::<Vec<_>>()));
        w.write_record([
            seed.to_string(),
            metric,
            end.to_string(),
            method,
            k.to_string(),
            recs.len().to_string(),
            ok.len().to_string(),
            col(|r| r.forget_acc),
            col(|r| r.retain_acc),
            col(|r| r.test_acc),
            col(|r| r.forget_loss),
            col(|r| r.retain_loss),
            col(|r| r.test_loss),
            col(|r| if r.success { 1.0 } else { 0.0 }),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and population standard deviation of membership-attack efficacy per group.
pub fn write_mia_table<W: Write>(records: &[RunRecord], out: W) -> CliResult<()> {
    let mut w = writer(out);
    w.write_record([
        "seed",
        "metric",
        "easy_or_difficult",
        "method",
        "k_expansion",
        "ok_runs",
        "mia_efficacy_mean",
        "mia_efficacy_std",
    ])?;
    for ((seed, metric, end, method, k), recs) in groups(records) {
        let values: Vec<f64> = recs.iter().filter_map(|r| r.report.as_ref()).map(|r| r.mia_efficacy).collect();
        let m = mean(&values);
        let sd = m.map(|m| (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt());
        w.write_record([
            seed.to_string(),
            metric,
            end.to_string(),
            method,
            k.to_string(),
            values.len().to_string(),
            fmt_opt(m),
            fmt_opt(sd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn any_failed(records: &[RunRecord]) -> bool {
    records.iter().any(|r| r.status != Status::Ok)
}
