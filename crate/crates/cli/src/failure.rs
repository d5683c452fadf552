//! Errors tagged with the process exit code they map to.

use std::fmt;

/// Exit codes are a stable contract: 0 success, 1 usage, 2 I/O, 3 scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 1,
    Io = 2,
    Scenario = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: ExitKind,
    pub error: anyhow::Error,
}

pub type CliResult<T> = Result<T, Failure>;

impl Failure {
    pub fn new(kind: ExitKind, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            kind,
            error: error.into(),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(ExitKind::Usage, anyhow::anyhow!("{msg}"))
    }

    pub fn scenario(msg: impl fmt::Display) -> Self {
        Self::new(ExitKind::Scenario, anyhow::anyhow!("{msg}"))
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self::new(ExitKind::Io, anyhow::anyhow!("{}: {e}", path.display()))
    }

    pub fn code(&self) -> u8 {
        self.kind as u8
    }
}

impl From<tailtp_core::Error> for Failure {
    fn from(e: tailtp_core::Error) -> Self {
        use tailtp_core::Error as E;
        let kind = match &e {
            E::Io { .. } | E::Parse { .. } => ExitKind::Io,
            E::Internal(_) => ExitKind::Usage,
            _ => ExitKind::Scenario,
        };
        Failure::new(kind, e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}
