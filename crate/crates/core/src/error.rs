use thiserror::Error;

/// Every fallible operation in the crate reports through this type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("parameter bundle error: {0}")]
    Bundle(String),

    #[error("generation error: {0}")]
    Generation(String),

    #[error("attack error: {0}")]
    Attack(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Wraps the message with a prefix, keeping the variant.
    pub fn context(self, prefix: impl std::fmt::Display) -> Self {
        use Error::*;
        match self {
            Dimension(m) => Dimension(format!("{prefix}: {m}")),
            Index(m) => Index(format!("{prefix}: {m}")),
            Contract(m) => Contract(format!("{prefix}: {m}")),
            Plan(m) => Plan(format!("{prefix}: {m}")),
            Bundle(m) => Bundle(format!("{prefix}: {m}")),
            Generation(m) => Generation(format!("{prefix}: {m}")),
            Attack(m) => Attack(format!("{prefix}: {m}")),
            Training(m) => Training(format!("{prefix}: {m}")),
            Evaluation(m) => Evaluation(format!("{prefix}: {m}")),
            Format(m) => Format(format!("{prefix}: {m}")),
            Config(m) => Config(format!("{prefix}: {m}")),
            Io(e) => Io(std::io::Error::new(e.kind(), format!("{prefix}: {e}"))),
        }
    }

    /// The message without the variant prefix.
    pub fn message(&self) -> String {
        use Error::*;
        match self {
            Dimension(m) | Index(m) | Contract(m) | Plan(m) | Bundle(m) | Generation(m) | Attack(m) | Training(m)
            | Evaluation(m) | Format(m) | Config(m) => m.clone(),
            Io(e) => e.to_string(),
        }
    }
}
