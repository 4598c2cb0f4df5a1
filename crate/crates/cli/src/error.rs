use std::path::PathBuf;

use dca_core::DcaError;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config error{}: {message}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Config { line: Option<usize>, message: String },
    #[error("missing artifact {}: run `dca {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("artifacts come from different configs: {0}")]
    HashMismatch(String),
    #[error(transparent)]
    Core(#[from] DcaError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed report {}: {message}", path.display())]
    Report { path: PathBuf, message: String },
}

impl CliError {
    /// 1 usage or config, 2 missing or incompatible artifact, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::Io { .. } => 1,
            CliError::MissingArtifact { .. } | CliError::HashMismatch(_) | CliError::Report { .. } => 2,
            CliError::Core(e) => match e {
                DcaError::Checkpoint(_) | DcaError::CheckpointVersion { .. } | DcaError::Parse { .. } => 2,
                DcaError::MissingBarrierStats(..) => 3,
                e if e.is_numeric() => 3,
                _ => 1,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::MissingArtifact { .. } => "missing_artifact",
            CliError::HashMismatch(_) => "config_hash_mismatch",
            CliError::Core(DcaError::CheckpointVersion { .. }) => "checkpoint_version",
            CliError::Core(e) if e.is_numeric() => "numeric",
            CliError::Core(_) => "core",
            CliError::Io { .. } => "io",
            CliError::Report { .. } => "report",
        }
    }

    /// One-line machine-readable form for stderr.
    pub fn to_json(&self) -> String {
        let mut v = json!({ "error": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() });
        match self {
            CliError::Config { line: Some(l), .. } => v["line"] = json!(l),
            CliError::MissingArtifact { path, producer } => {
                v["path"] = json!(path.display().to_string());
                v["producer"] = json!(producer);
            }
            _ => {}
        }
        v.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        let missing = CliError::MissingArtifact { path: "models/score.dca".into(), producer: "train-score" };
        assert_eq!(missing.exit_code(), 2);
        assert_eq!(CliError::Core(DcaError::NonFiniteLoss { iteration: 3, loss: f64::NAN }).exit_code(), 3);
        let j: serde_json::Value = serde_json::from_str(&missing.to_json()).unwrap();
        assert_eq!(j["error"], "missing_artifact");
        assert_eq!(j["exit_code"], 2);
    }
}
