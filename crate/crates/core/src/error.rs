use std::path::PathBuf;

use thiserror::Error;

/// Snapshot captured when a training step produces a non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteDiagnostic {
    pub epoch: usize,
    pub step: usize,
    pub losses: Vec<(String, f64)>,
    /// (mean, min, max) of the discriminator scores seen in the failing step.
    pub real_scores: (f64, f64, f64),
    pub fake_scores: (f64, f64, f64),
}

impl std::fmt::Display for NonFiniteDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "epoch {} step {}:", self.epoch, self.step)?;
        for (name, value) in &self.losses {
            write!(f, " {name}={value}")?;
        }
        let (rm, rlo, rhi) = self.real_scores;
        let (fm, flo, fhi) = self.fake_scores;
        write!(
            f,
            " real_scores(mean={rm:.4}, min={rlo:.4}, max={rhi:.4}) fake_scores(mean={fm:.4}, min={flo:.4}, max={fhi:.4})"
        )
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("spatial size error: {0}")]
    SpatialSize(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("dataset path not found: {}", .0.display())]
    MissingDataset(PathBuf),

    #[error("non-finite loss, run aborted at {0}")]
    NonFinite(Box<NonFiniteDiagnostic>),

    #[error("unsupported: {0}")]
    Unsupported(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
