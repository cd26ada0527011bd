use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("textgrid line {line}: {message}")]
    TextGridSyntax { line: usize, message: String },

    #[error("textgrid tier {tier:?} is a point tier; only interval tiers are supported")]
    PointTier { tier: String },

    #[error("textgrid tier {tier:?}: {message}")]
    TierInvalid { tier: String, message: String },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("duplicate utterance id {0:?}")]
    DuplicateUtterance(String),

    #[error("cannot map {word:?} at byte {position}: no rule for {remaining:?}")]
    Unmappable {
        word: String,
        position: usize,
        remaining: String,
    },

    #[error("{} unmappable word(s): {}", .0.len(), summarize(.0))]
    LexiconFailures(Vec<String>),

    #[error("class map: {0}")]
    ClassMap(String),

    #[error("grapheme map: {0}")]
    GraphemeMap(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("audio too short: {0}")]
    TooShort(String),

    #[error("codec hook failed ({status}): {stderr}")]
    CodecHook { status: String, stderr: String },

    #[error("duplicate augmentation tag {0:?}")]
    DuplicateTag(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("lda: {0}")]
    Lda(String),

    #[error("out-of-vocabulary word {0:?}")]
    OutOfVocabulary(String),

    #[error("no valid alignment path: {frames} frames for at least {required} states")]
    NoPath { frames: usize, required: usize },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("schedule: {0}")]
    Schedule(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("label mismatch at position {position}: reference {reference:?}, hypothesis {hypothesis:?}")]
    LabelMismatch {
        position: usize,
        reference: String,
        hypothesis: String,
    },

    #[error("evaluation: {0}")]
    Evaluation(String),

    #[error("config: {0}")]
    Config(String),

    #[error("sweep: {0}")]
    Sweep(String),
}

fn summarize(words: &[String]) -> String {
    const SHOWN: usize = 10;
    let mut out = words.iter().take(SHOWN).cloned().collect::<Vec<_>>().join(", ");
    if words.len() > SHOWN {
        out.push_str(", ...");
    }
    out
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Validation errors are the user's to fix; everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::CodecHook { .. } | Error::NoPath { .. } | Error::Sweep(_)
        )
    }
}
