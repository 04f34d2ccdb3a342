use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the primitive's signature.
    #[error("dimension error in {primitive}: {detail}")]
    Dimension {
        primitive: &'static str,
        detail: String,
    },

    /// NaN or infinity observed at an op boundary.
    #[error("non-finite value in {primitive}{}{}",
        .stage.as_ref().map(|s| format!(" (stage {s})")).unwrap_or_default(),
        .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFinite {
        primitive: &'static str,
        stage: Option<String>,
        step: Option<usize>,
    },

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {detail}")]
    Parse { line: u64, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(primitive: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            primitive,
            detail: detail.into(),
        }
    }

    /// Attach a stage name to a numeric error; other errors pass through.
    pub fn at_stage(self, name: &str) -> Self {
        match self {
            Error::NonFinite {
                primitive,
                stage: None,
                step,
            } => Error::NonFinite {
                primitive,
                stage: Some(name.to_string()),
                step,
            },
            other => other,
        }
    }

    pub fn at_step(self, at: usize) -> Self {
        match self {
            Error::NonFinite {
                primitive,
                stage,
                step: None,
            } => Error::NonFinite {
                primitive,
                stage,
                step: Some(at),
            },
            other => other,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite { .. })
    }
}
