use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dataset layout: missing {}", .0.display())]
    DatasetLayout(PathBuf),

    #[error("dataset layout: no ground-truth mask for anomalous image {}", .0.display())]
    MissingMask(PathBuf),

    #[error("mask {} must be a single-channel image", .0.display())]
    MaskChannels(PathBuf),

    #[error("no images found in {}", .0.display())]
    EmptyFolder(PathBuf),

    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("cannot decode {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Core(#[from] ets_core::Error),

    #[error("shape mismatch in {context}: {left:?} vs {right:?}")]
    Shape {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("input size {height}x{width} is not divisible by {divisor}")]
    IndivisibleInput {
        height: usize,
        width: usize,
        divisor: usize,
    },

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("weight file not found: {}", .0.display())]
    MissingWeightFile(PathBuf),

    #[error("unknown weight source `{0}`")]
    UnknownWeights(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch (file truncated or corrupt)")]
    Checksum,

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("checkpoint architecture `{found}` does not match `{expected}`")]
    Architecture { found: String, expected: String },

    #[error("non-finite loss at iteration {iteration}: L_TE^n={teacher_normal}, L_TE^a={teacher_anomalous}, L_S={student}")]
    NonFiniteLoss {
        iteration: u64,
        teacher_normal: f64,
        teacher_anomalous: f64,
        student: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Yaml(#[from] serde_yaml::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
