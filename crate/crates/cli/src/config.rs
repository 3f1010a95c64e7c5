//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use steinrank::eval::DEFAULT_EPSILON;
use steinrank::scoring::DEFAULT_ENTROPY_FLOOR;
use steinrank::{Metric, MiaCalibration, NetworkSpec, Standardization, UnlearnConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic Gaussian clusters, one per center.
    Blobs {
        n_per_class: usize,
        centers: Vec<Vec<f64>>,
        std: f64,
        seed: u64,
    },
    /// Headed CSV; every column except `label_column` is a feature.
    Csv {
        path: PathBuf,
        #[serde(default = "default_label_column")]
        label_column: String,
    },
    /// IDX image and label files, pixels scaled to [0, 1].
    Idx { images: PathBuf, labels: PathBuf },
}

fn default_label_column() -> String {
    "label".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Z-score every feature over the whole dataset before splitting.
    #[serde(default)]
    pub standardize: bool,
    pub network: NetworkSpec,
    pub training: TrainingConfig,
    pub metrics: Vec<Metric>,
    pub methods: Vec<UnlearnConfig>,
    #[serde(default = "default_top_k")]
    pub top_k_each_end: usize,
    #[serde(default = "default_expansion_ks")]
    pub expansion_ks: Vec<usize>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_entropy_floor")]
    pub entropy_floor: f64,
    #[serde(default)]
    pub standardization: Standardization,
    #[serde(default)]
    pub mia_calibration: MiaCalibration,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_top_k() -> usize {
    5
}

fn default_expansion_ks() -> Vec<usize> {
    vec![0, 10, 50]
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_entropy_floor() -> f64 {
    DEFAULT_ENTROPY_FLOOR
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                CliError::Config(inner.to_string())
            } else {
                CliError::Config(format!("at `{path}`: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative dataset paths are resolved against the
    /// directory containing the file.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetConfig::Blobs { .. } => {}
            DatasetConfig::Csv { path, .. } => fix(path),
            DatasetConfig::Idx { images, labels } => {
                fix(images);
                fix(labels);
            }
        }
    }

    /// Pretty JSON with every default filled in.
    pub fn canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.metrics.is_empty() {
            return bad("`metrics` must list at least one metric".into());
        }
        if self.methods.is_empty() {
            return bad("`methods` must list at least one method".into());
        }
        if self.seeds.is_empty() {
            return bad("`seeds` must list at least one seed".into());
        }
        if !self.expansion_ks.windows(2).all(|w| w[0] < w[1]) {
            return bad("`expansion_ks` must be strictly ascending".into());
        }
        if self.top_k_each_end == 0 {
            return bad("`top_k_each_end` must be positive".into());
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("`epsilon` must be nonnegative, got {}", self.epsilon));
        }
        if !(self.entropy_floor > 0.0 && self.entropy_floor.is_finite()) {
            return bad(format!("`entropy_floor` must be positive, got {}", self.entropy_floor));
        }
        if !(self.training.lr > 0.0 && self.training.lr.is_finite()) {
            return bad(format!("`training.lr` must be positive, got {}", self.training.lr));
        }
        if self.training.batch_size == 0 {
            return bad("`training.batch_size` must be positive".into());
        }
        for (i, m) in self.methods.iter().enumerate() {
            m.validate().map_err(|e| CliError::Config(format!("at `methods[{i}]`: {e}")))?;
        }
        self.network
            .validate()
            .map_err(|e| CliError::Config(format!("at `network`: {e}")))?;
        Ok(())
    }

    /// Replaces the seed list with a single seed.
    pub fn override_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
    }

    /// Replaces the metric list, e.g. from a comma-separated flag.
    pub fn override_metrics(&mut self, metrics: Option<Vec<Metric>>) -> CliResult<()> {
        if let Some(m) = metrics {
            if m.is_empty() {
                return Err(CliError::Config("`--metrics` needs at least one metric".into()));
            }
            self.metrics = m;
        }
        Ok(())
    }

    /// Keeps the named methods, taking their settings from the config when
    /// present and reference defaults otherwise.
    pub fn override_methods(&mut self, methods: Option<Vec<steinrank::Method>>) -> CliResult<()> {
        if let Some(list) = methods {
            if list.is_empty() {
                return Err(CliError::Config("`--methods` needs at least one method".into()));
            }
            self.methods = list
                .into_iter()
                .map(|m| {
                    self.methods
                        .iter()
                        .find(|c| c.method == m)
                        .cloned()
                        .unwrap_or_else(|| UnlearnConfig::defaults_for(m))
                })
                .collect();
        }
        Ok(())
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> CliResult<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .ok_or_else(|| CliError::Config("no output directory: pass `--out` or set `output_dir`".into()))
    }
}
