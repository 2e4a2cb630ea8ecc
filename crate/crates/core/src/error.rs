use std::path::PathBuf;

/// Errors surfaced by every subsystem of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller broke an operation's precondition (shapes, arity, scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced while differentiating `{op}`")]
    NonFinite { op: &'static str },

    #[error("gradient for parameter `{name}` has shape {grad:?}, parameter has {param:?}")]
    GradShape {
        name: String,
        grad: Vec<usize>,
        param: Vec<usize>,
    },

    #[error("closure is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("unsupported format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("word `{0}` is not in the lexicon and grapheme fallback is disabled")]
    OutOfVocabulary(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Configuration rejected before any work started.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("utterance `{id}`: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::result::Result<T, std::io::Error> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
