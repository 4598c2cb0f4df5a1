//! Output-directory layout, config-hash stamping and artifact loading.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use dca_core::barrier::BarrierStats;
use dca_core::classifier::Classifier;
use dca_core::diffusion::ScoreModel;
use dca_core::selfcorrect::{read_cf_csv, CounterfactualSample};
use dca_core::synthdata::{Codec, Dataset, Split};
use serde::Serialize;

use crate::error::CliError;

pub const TRAIN: &str = "data/train.csv";
pub const VAL: &str = "data/val.csv";
pub const TEST: &str = "data/test.csv";
pub const SCORE: &str = "models/score.dca";
pub const CLASSIFIER: &str = "models/classifier.dca";
pub const BARRIER_RESULTS: &str = "barrier/results.csv";
pub const BARRIER_STATS: &str = "barrier/stats.csv";
pub const CF_SET: &str = "cf/counterfactuals.csv";
pub const CF_REPORT: &str = "reports/counterfactuals.json";
pub const SCORE_REPORT: &str = "reports/score_train.json";
pub const CLASSIFIER_REPORT: &str = "reports/classifier.json";
pub const SELF_CORRECT_REPORT: &str = "reports/self_correct.json";
pub const ABLATION_REPORT: &str = "reports/ablation.json";
pub const METRICS_JSON: &str = "reports/metrics.json";
pub const METRICS_CSV: &str = "reports/metrics.csv";
pub const RESOLVED_CONFIG: &str = "resolved_config.toml";

pub struct Workspace {
    pub root: PathBuf,
    pub hash: String,
    pub num_classes: usize,
    pub codec: Codec,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Hash from a leading `# config_hash=...` line.
pub fn csv_hash(bytes: &[u8]) -> Option<String> {
    let first = bytes.split(|&b| b == b'\n').next()?;
    let line = std::str::from_utf8(first).ok()?;
    line.strip_prefix("# config_hash=").map(|h| h.trim().to_string())
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>, hash: String, num_classes: usize, dim: usize) -> Self {
        Self { root: root.into(), hash, num_classes, codec: Codec::identity(dim) }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn stamp(&self) -> String {
        format!("config_hash={}", self.hash)
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))
    }

    /// Renders into a buffer first so a failed render leaves no partial file.
    pub fn write_with(&self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> dca_core::Result<()>) -> Result<(), CliError> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(rel, &buf)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn read(&self, rel: &str, producer: &'static str) -> Result<Vec<u8>, CliError> {
        let path = self.path(rel);
        fs::read(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => CliError::MissingArtifact { path, producer },
            _ => CliError::Io { path, source: e },
        })
    }

    pub fn dataset(&self, split: Split) -> Result<Dataset, CliError> {
        let rel = match split {
            Split::Train => TRAIN,
            Split::Val => VAL,
            Split::Test => TEST,
        };
        let bytes = self.read(rel, "gen-data")?;
        Ok(Dataset::read_csv(bytes.as_slice(), split, Some(self.num_classes))?)
    }

    pub fn score_model(&self) -> Result<ScoreModel, CliError> {
        Ok(ScoreModel::from_checkpoint(&self.read(SCORE, "train-score")?)?.0)
    }

    /// The reference classifier, frozen as stored.
    pub fn classifier(&self) -> Result<Classifier, CliError> {
        Ok(Classifier::from_checkpoint(&self.read(CLASSIFIER, "train-classifier")?)?.0)
    }

    pub fn barrier_stats(&self) -> Result<BarrierStats, CliError> {
        Ok(BarrierStats::read_csv(self.read(BARRIER_STATS, "probe-barrier")?.as_slice())?)
    }

    pub fn counterfactuals(&self) -> Result<Vec<CounterfactualSample>, CliError> {
        Ok(read_cf_csv(self.read(CF_SET, "generate")?.as_slice(), &self.codec)?)
    }

    /// Config hash recorded in an existing artifact, if it records one.
    pub fn recorded_hash(&self, rel: &str) -> Result<Option<String>, CliError> {
        let path = self.path(rel);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if rel.ends_with(".dca") {
            let (meta, _) = dca_core::nn::checkpoint::decode(&bytes)?;
            return Ok(meta.config_hash);
        }
        if rel.ends_with(".json") {
            let v: serde_json::Value = serde_json::from_slice(&bytes)
                .map_err(|e| CliError::Report { path: path.clone(), message: e.to_string() })?;
            return Ok(v.get("config_hash").and_then(|h| h.as_str()).map(str::to_string));
        }
        Ok(csv_hash(&bytes))
    }
}
