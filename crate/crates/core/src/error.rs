use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),

    #[error("degenerate axes: |<a_x, a_z>| = {0}")]
    DegenerateAxes(f64),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("unknown category `{0}`")]
    Category(String),

    #[error("format error in {path:?} at byte {offset}: {msg}")]
    Format {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("load error in {path:?}, field `{field}`: {msg}")]
    Load {
        path: PathBuf,
        field: String,
        msg: String,
    },

    #[error("unmatched prediction/ground-truth ids: {0:?}")]
    Pairing(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("refusing to write into non-empty directory {0:?} (pass --overwrite)")]
    Exists(PathBuf),

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path:?}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from invalid user input (configs, files on
    /// disk) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Format { .. }
                | Error::Load { .. }
                | Error::Category(_)
                | Error::Exists(_)
                | Error::Dependency(_)
                | Error::Json { .. }
        )
    }
}
