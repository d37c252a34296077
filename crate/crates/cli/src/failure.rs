//! Error classes and their exit codes.

use std::fmt;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    /// Bad flags, config or echo subset.
    Usage = 1,
    /// Missing or malformed inputs, I/O failures.
    Data = 2,
    /// Divergence or a failed numeric self-test.
    Numeric = 3,
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Failure { kind, error: error.into() }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Tag any error with an exit class.
pub trait Classify<T> {
    fn or_usage(self) -> CliResult<T>;
    fn or_data(self) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_usage(self) -> CliResult<T> {
        self.map_err(|e| Failure::new(Kind::Usage, e))
    }

    fn or_data(self) -> CliResult<T> {
        self.map_err(|e| Failure::new(Kind::Data, e))
    }
}

/// Training errors split by cause.
pub fn training_failure(e: dxsep::TrainError) -> Failure {
    use dxsep::TrainError as E;
    let kind = match &e {
        E::Config(_) | E::TooFewSubjects { .. } => Kind::Usage,
        E::Diverged { .. } => Kind::Numeric,
        _ => Kind::Data,
    };
    Failure::new(kind, e)
}
