use std::path::PathBuf;

/// Errors raised anywhere in the exposure pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    #[error("schema mismatch in {path}: expected header `{expected}`, found `{found}`")]
    Schema {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("unknown tower ids: {0}")]
    UnknownTowers(String),

    #[error("missing upstream artifact {path}: run the `{stage}` stage first")]
    MissingArtifact { path: PathBuf, stage: &'static str },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than by a
    /// failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Parse { .. }
                | Error::Schema { .. }
                | Error::UnknownTowers(_)
                | Error::MissingArtifact { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Formats a list of identifiers for an error message, truncating long lists.
pub(crate) fn list_ids<S: AsRef<str>>(ids: &[S]) -> String {
    const SHOWN: usize = 20;
    let mut out: Vec<&str> = ids.iter().take(SHOWN).map(AsRef::as_ref).collect();
    let extra = ids.len().saturating_sub(SHOWN);
    let more = format!("... ({extra} more)");
    if extra > 0 {
        out.push(&more);
    }
    out.join(", ")
}
