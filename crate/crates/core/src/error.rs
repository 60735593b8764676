use std::path::PathBuf;

/// Errors produced by the audit pipeline and its building blocks.
#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("backend capability unavailable: {0}")]
    Capability(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dangling reference: {0}")]
    DanglingReference(String),

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("unsatisfiable bias target {target}: achievable co-occurrence range is [{min:.4}, {max:.4}]")]
    UnsatisfiableBias { target: f64, min: f64, max: f64 },

    #[error("unsupported schema version {found} (supported: {supported})")]
    SchemaVersion { found: u64, supported: u64 },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<AuditError>,
    },

    #[error("image error for {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl AuditError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AuditError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        AuditError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = AuditError> = std::result::Result<T, E>;
