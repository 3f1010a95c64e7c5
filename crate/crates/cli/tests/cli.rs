use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use steinrank_cli::commands;
use steinrank_cli::pipeline::Status;
use steinrank_cli::report::read_reports_jsonl;

const GRAD_ASCENT: &str = r#"{"method": "grad_ascent", "lr": 0.05, "epochs": 100, "overfit_threshold": 3.0}"#;

fn small_config(methods: &str, metrics: &str, ks: &str) -> String {
    format!(
        r#"{{
  "dataset": {{"kind": "blobs", "n_per_class": 30, "centers": [[0.0, 0.0], [3.0, 0.0], [1.5, 2.6]], "std": 0.6, "seed": 5}},
  "network": {{"layer_sizes": [2, 8, 3], "activation": "tanh"}},
  "training": {{"lr": 0.1, "epochs": 30, "batch_size": 8}},
  "metrics": {metrics},
  "methods": [{methods}],
  "expansion_ks": {ks},
  "seeds": [3]
}}"#
    )
}

fn setup(config: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(&cfg, config).unwrap();
    let out = dir.path().join("out");
    (dir, cfg, out)
}

fn run(args: &[&str], cfg: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steinrank"))
        .args(&args[..1])
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(&args[1..])
        .output()
        .expect("binary runs")
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

#[test]
fn train_writes_model_and_log_deterministically() {
    let (_d, cfg, out) = setup(&small_config(GRAD_ASCENT, r#"["pc"]"#, "[0]"));
    assert_eq!(run(&["train"], &cfg, &out).status.code(), Some(0));
    let model = std::fs::read(out.join(commands::model_file(3))).unwrap();
    let log = out.join(commands::train_log_file(3));
    assert_eq!(header(&log), ["epoch", "train_loss", "train_acc"]);
    let rows = csv_rows(&log);
    assert_eq!(rows.len(), 30);
    let acc: f64 = rows.last().unwrap()[2].parse().unwrap();
    assert!(acc >= 0.9, "train accuracy {acc}");

    assert_eq!(run(&["train"], &cfg, &out).status.code(), Some(0));
    assert_eq!(std::fs::read(out.join(commands::model_file(3))).unwrap(), model);
}

#[test]
fn seed_flag_overrides_config() {
    let (_d, cfg, out) = setup(&small_config(GRAD_ASCENT, r#"["pc"]"#, "[0]"));
    assert_eq!(run(&["train", "--seed", "11"], &cfg, &out).status.code(), Some(0));
    assert!(out.join(commands::model_file(11)).exists());
    assert!(!out.join(commands::model_file(3)).exists());
}

#[test]
fn config_errors_exit_with_one_and_name_the_field() {
    let text = small_config(GRAD_ASCENT, r#"["pc"]"#, "[0]").replacen("\"dataset\"", "\"dataset_\"", 1);
    let (_d, cfg, out) = setup(&text);
    let o = run(&["train"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("dataset"), "{err}");

    let o = run(&["train"], Path::new("/nonexistent/config.json"), &out);
    assert_eq!(o.status.code(), Some(1));

    let (_d, cfg, out) = setup(&small_config(GRAD_ASCENT, r#"["pc"]"#, "[0]"));
    let o = run(&["score"], &cfg, &out);
    assert_eq!(o.status.code(), Some(1), "scoring without a model must fail");
    assert!(String::from_utf8_lossy(&o.stderr).contains("train"));
}

#[test]
fn score_emits_every_metric_for_every_training_sample() {
    let (_d, cfg, out) = setup(&small_config(GRAD_ASCENT, r#"["pc"]"#, "[0]"));
    assert_eq!(run(&["train"], &cfg, &out).status.code(), Some(0));
    let all = "mksd,msksd,ssn,emsksd,pc";
    assert_eq!(run(&["score", "--metrics", all, "--kernel"], &cfg, &out).status.code(), Some(0));
    let path = out.join(commands::rankings_file(3));
    let first = std::fs::read(&path).unwrap();
    assert_eq!(header(&path), ["sample_id", "metric", "score", "rank_easy_to_hard"]);
    let rows = csv_rows(&path);
    let n_train = 72;
    assert_eq!(rows.len(), 5 * n_train);
    for metric in all.split(',') {
        let mut ranks: Vec<usize> = rows.iter().filter(|r| r[1] == metric).map(|r| r[3].parse().unwrap()).collect();
        ranks.sort_unstable();
        assert_eq!(ranks, (0..n_train).collect::<Vec<_>>(), "{metric}");
    }
    let kernel = std::fs::read_to_string(out.join(commands::kernel_file(3))).unwrap();
    assert_eq!(kernel.lines().count(), n_train + 1);
    assert!(!kernel.contains('\r'));

    assert_eq!(run(&["score", "--metrics", all], &cfg, &out).status.code(), Some(0));
    assert_eq!(std::fs::read(&path).unwrap(), first);
}

#[test]
fn rank_unlearn_evaluate_chain() {
    let methods = format!(r#"{GRAD_ASCENT}, {{"method": "fine_tune", "lr": 0.05, "epochs": 2}}"#);
    let (_d, cfg, out) = setup(&small_config(&methods, r#"["emsksd", "ssn"]"#, "[0]"));
    assert_eq!(run(&["train"], &cfg, &out).status.code(), Some(0));
    assert_eq!(run(&["score"], &cfg, &out).status.code(), Some(0));
    assert_eq!(run(&["rank"], &cfg, &out).status.code(), Some(0));
    let selection = csv_rows(&out.join(commands::selection_file(3)));
    assert_eq!(selection.len(), 2 * 2 * 5);
    let target = selection.iter().find(|r| r[0] == "emsksd" && r[1] == "easy").unwrap()[3].clone();

    let o = run(&["unlearn", "--targets", &target, "--expand", "2"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: commands::Manifest =
        serde_json::from_str(&std::fs::read_to_string(out.join(commands::manifest_file(3))).unwrap()).unwrap();
    assert_eq!(manifest.entries.len(), 2);
    assert!(manifest.entries.iter().all(|e| e.forget_ids.len() == 3));

    assert_eq!(run(&["evaluate"], &cfg, &out).status.code(), Some(0));
    let path = out.join(commands::EVALUATION_CSV);
    assert_eq!(header(&path)[..17], steinrank_cli::report::REPORT_COLUMNS[..17]);
    assert_eq!(csv_rows(&path).len(), 2);
}

#[test]
fn experiment_cardinality_and_aggregation() {
    let (_d, cfg, out) = setup(&small_config(GRAD_ASCENT, r#"["emsksd"]"#, "[0]"));
    let o = run(&["experiment"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let reports = out.join(commands::REPORTS_CSV);
    assert_eq!(header(&reports), steinrank_cli::report::REPORT_COLUMNS);
    let rows = csv_rows(&reports);
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r[17] == "ok"));

    let table = csv_rows(&out.join(commands::ACCURACY_TABLE));
    assert_eq!(table.len(), 2);
    for agg in &table {
        let members: Vec<f64> = rows
            .iter()
            .filter(|r| r[3] == agg[2])
            .map(|r| r[6].parse().unwrap())
            .collect();
        assert_eq!(members.len(), 5);
        let expected = members.iter().sum::<f64>() / 5.0;
        let got: f64 = agg[7].parse().unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    let records = read_reports_jsonl(&std::fs::read_to_string(out.join(commands::REPORTS_JSONL)).unwrap()).unwrap();
    assert_eq!(records.len(), 10);
    assert!(records.iter().zip(&rows).all(|(rec, row)| rec.run_id == row[0]));
}

#[test]
fn methods_flag_selects_methods() {
    let (_d, cfg, out) = setup(&small_config(GRAD_ASCENT, r#"["pc"]"#, "[0, 2]"));
    let o = run(&["experiment", "--methods", "fisher,grad_ascent", "--metrics", "ssn"], &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = csv_rows(&out.join(commands::REPORTS_CSV));
    assert_eq!(rows.len(), 2 * 5 * 2 * 2);
    assert!(rows.iter().all(|r| r[1] == "ssn"));
    assert_eq!(rows[0][4], "fisher");
}

#[test]
fn numerical_failures_are_isolated_per_row() {
    let methods = r#"{"method": "grad_ascent", "lr": 1.7976931348623157e308, "epochs": 5, "overfit_threshold": 1e300},
                     {"method": "fine_tune", "lr": 0.05, "epochs": 1}"#;
    let (_d, cfg, out) = setup(&small_config(methods, r#"["pc"]"#, "[0]"));
    let o = run(&["experiment"], &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    let records = read_reports_jsonl(&std::fs::read_to_string(out.join(commands::REPORTS_JSONL)).unwrap()).unwrap();
    assert_eq!(records.len(), 20);
    let failed: Vec<_> = records.iter().filter(|r| r.status != Status::Ok).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|r| r.status == Status::NumericalFailure && r.error.is_some()));
    assert!(records
        .iter()
        .filter(|r| r.method == steinrank::Method::FineTune)
        .all(|r| r.status == Status::Ok && r.report.is_some()));
    let rows = csv_rows(&out.join(commands::REPORTS_CSV));
    let failed_row = rows.iter().find(|r| r[17] == "numerical_failure").unwrap();
    assert!(failed_row[6..17].iter().all(String::is_empty));
}
