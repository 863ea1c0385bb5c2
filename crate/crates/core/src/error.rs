use std::path::PathBuf;

/// Errors raised anywhere in the guidance pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("role word `{word}` not found in prompt `{prompt}`")]
    RoleWordNotFound { word: String, prompt: String },
    #[error("role word `{word}` occurs {count} times in `{prompt}`; add an occurrence ordinal (`{word}#k`)")]
    AmbiguousRoleWord {
        word: String,
        prompt: String,
        count: usize,
    },
    #[error("word `{word}` is assigned to more than one role")]
    RoleOverlap { word: String },
    #[error("malformed role word `{0}`")]
    MalformedRoleWord(String),
    #[error("word filtering left no non-conflicting words")]
    EmptyResult,
    #[error("backbone exposes no cross-attention sites")]
    NoAttentionSites,
    #[error("every token column is marked special")]
    AllTokensSpecial,
    #[error("archive has no entry for step {step}, layer {layer}, module {module}")]
    MissingArchiveEntry {
        step: usize,
        layer: u32,
        module: u32,
    },
    #[error("token set is empty")]
    EmptyTokenSet,
    #[error("no middle-block mask for step {0}")]
    MissingMiddleBlockMask(usize),
    #[error("target dimension is zero")]
    ZeroTargetDimension,
    #[error("target token count must be positive when conflicting tokens are present")]
    NonPositiveNTar,
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },
    #[error("token index {index} out of range for {len} tokens")]
    TargetIndexOutOfRange { index: usize, len: usize },
    #[error("{name} = {value} outside [{min}, {max}]")]
    ValueOutOfRange {
        name: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid condition image: {0}")]
    InvalidCondition(String),
    #[error("no results to lay out")]
    EmptyResults,
    #[error("malformed container: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("png: {0}")]
    Png(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(expected: impl std::fmt::Display, actual: impl std::fmt::Display) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with the name of the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Short machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::RoleWordNotFound { .. } => "RoleWordNotFound",
            Error::AmbiguousRoleWord { .. } => "AmbiguousRoleWord",
            Error::RoleOverlap { .. } => "RoleOverlap",
            Error::MalformedRoleWord(_) => "MalformedRoleWord",
            Error::EmptyResult => "EmptyResult",
            Error::NoAttentionSites => "NoAttentionSites",
            Error::AllTokensSpecial => "AllTokensSpecial",
            Error::MissingArchiveEntry { .. } => "MissingArchiveEntry",
            Error::EmptyTokenSet => "EmptyTokenSet",
            Error::MissingMiddleBlockMask(_) => "MissingMiddleBlockMask",
            Error::ZeroTargetDimension => "ZeroTargetDimension",
            Error::NonPositiveNTar => "NonPositiveNTar",
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::TargetIndexOutOfRange { .. } => "TargetIndexOutOfRange",
            Error::ValueOutOfRange { .. } => "ValueOutOfRange",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::InvalidCondition(_) => "InvalidCondition",
            Error::EmptyResults => "EmptyResults",
            Error::Format(_) => "Format",
            Error::Io { .. } => "Io",
            Error::Png(_) => "Png",
            Error::Json(_) => "Json",
            Error::Stage { source, .. } => source.kind(),
        }
    }

    /// Pipeline stage that failed, when known.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
