use std::fmt;
use std::process::ExitCode;

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit 2.
    BadInput(String),
    /// Exit 3.
    Stage(String),
    /// Exit 4. Outputs were written.
    NotConverged(String),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        Self::BadInput(msg.into())
    }

    pub fn stage(msg: impl Into<String>) -> Self {
        Self::Stage(msg.into())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::BadInput(_) => 2,
            Self::Stage(_) => 3,
            Self::NotConverged(_) => 4,
        })
    }

    /// Core errors from user-supplied data are bad input, the rest are stage failures.
    pub fn from_core(e: erspin_core::Error) -> Self {
        use erspin_core::Error as E;
        match e {
            E::InvalidParameter(_) | E::DegenerateAxis | E::Io { .. } | E::Format { .. } => Self::BadInput(e.to_string()),
            E::UndefinedObjective(_) | E::FitFailed(_) => Self::Stage(e.to_string()),
        }
    }

    pub fn with_context(self, ctx: &str) -> Self {
        match self {
            Self::BadInput(m) => Self::BadInput(format!("{ctx}: {m}")),
            Self::Stage(m) => Self::Stage(format!("{ctx}: {m}")),
            Self::NotConverged(m) => Self::NotConverged(format!("{ctx}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadInput(m) => write!(f, "bad input: {m}"),
            Self::Stage(m) => write!(f, "stage failed: {m}"),
            Self::NotConverged(m) => write!(f, "not converged: {m}"),
        }
    }
}

impl From<erspin_core::Error> for CliError {
    fn from(e: erspin_core::Error) -> Self {
        Self::from_core(e)
    }
}
