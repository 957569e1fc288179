use std::path::PathBuf;

use polypforge_core::classifier::ClassifierError;
use polypforge_core::dataset::DatasetError;
use polypforge_core::eval::EvalError;
use polypforge_core::filter::FilterError;
use polypforge_core::gan::GanError;
use polypforge_core::turing::TuringError;

/// Errors sorted by the exit code they map to.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("missing {what}: {}", .path.display())]
    MissingArtifact { what: String, path: PathBuf },
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn config(field: impl Into<String>, message: impl ToString) -> Self {
        CliError::Config { field: field.into(), message: message.to_string() }
    }

    pub fn missing(what: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        CliError::MissingArtifact { what: what.into(), path: path.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::MissingFile(path) => CliError::missing("manifest", path),
            DatasetError::DanglingReference { path, .. } => CliError::missing("manifest image", path),
            DatasetError::InvalidToySpec { field, message } => CliError::config(format!("toy.{field}"), message),
            DatasetError::InvalidFractions(m) => CliError::config("toy.splits", m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ClassifierError> for CliError {
    fn from(e: ClassifierError) -> Self {
        match e {
            ClassifierError::InvalidConfig { field, message } => {
                CliError::config(format!("classifier.{field}"), message)
            }
            ClassifierError::UnsupportedDepth(d) => {
                CliError::config("classifier.depth", format!("unsupported depth {d}; expected 18, 34 or 50"))
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<GanError> for CliError {
    fn from(e: GanError) -> Self {
        match e {
            GanError::InvalidConfig { field, message } => CliError::config(format!("gan.{field}"), message),
            GanError::MissingCheckpoint(path) => CliError::missing("checkpoint", path),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<FilterError> for CliError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::AlphaOutOfRange(v) => CliError::config("filter.alpha", format!("{v} is outside (0, 1]")),
            FilterError::Classifier(c) => c.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Classifier(c) => c.into(),
            EvalError::Filter(f) => f.into(),
            EvalError::Gan(g) => g.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TuringError> for CliError {
    fn from(e: TuringError) -> Self {
        CliError::Runtime(e.to_string())
    }
}
