use std::fmt;

/// Pipeline stage that produced an error, used to tag propagated failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Factorization,
    Separation,
    BlockRecovery,
    Refinement,
    Evaluation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Factorization => "factorization",
            Stage::Separation => "separation",
            Stage::BlockRecovery => "block-recovery",
            Stage::Refinement => "refinement",
            Stage::Evaluation => "evaluation",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("affinity D_{k} is singular (condition estimate {condition:e})")]
    SingularAffinity { k: usize, condition: f64 },

    #[error("under-determined problem: {0}")]
    Underdetermined(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("refused: {0}")]
    Refused(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn at(self, stage: Stage) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage tags stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of numerical origin (as opposed to bad input or configuration).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::SingularAffinity { .. } | Error::Underdetermined(_) | Error::UndefinedMetric(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
