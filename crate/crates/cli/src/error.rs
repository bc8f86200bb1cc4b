use std::fmt;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_PLAN: u8 = 3;
pub const EXIT_NAN: u8 = 4;

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad or missing input: scenario, flags, plan directory, checkpoint.
    Config(anyhow::Error),
    Plan(anyhow::Error),
    NonFinite(anyhow::Error),
    /// Anything else, typically failing to write an output.
    Other(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Plan(_) => EXIT_PLAN,
            CliError::NonFinite(_) => EXIT_NAN,
            CliError::Other(_) => EXIT_FAILURE,
        }
    }

    fn inner(&self) -> &anyhow::Error {
        match self {
            CliError::Config(e)
            | CliError::Plan(e)
            | CliError::NonFinite(e)
            | CliError::Other(e) => e,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if f.alternate() {
            write!(f, "{:#}", self.inner())
        } else {
            write!(f, "{}", self.inner())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches an exit-code class to an error result.
pub trait Classify<T> {
    fn config(self, what: impl FnOnce() -> String) -> CliResult<T>;
    fn other(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn config(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Config(e.into().context(what())))
    }

    fn other(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Other(e.into().context(what())))
    }
}
