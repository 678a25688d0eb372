//! Exit-code convention: 0 success, 1 runtime failure (I/O, corrupt or
//! unusable files), 2 usage error (bad flags, invalid plans, missing
//! inputs).

use sinktrack_core::{Error, FormatError};

pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub fn usage(message: impl Into<String>) -> CliError {
    CliError {
        code: 2,
        message: message.into(),
    }
}

pub fn runtime(message: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: message.into(),
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> CliError {
        let code = match &err {
            // broken files and internal inconsistencies are runtime failures
            Error::Format(FormatError::Io { .. }) => 1,
            Error::Format(_) => 1,
            Error::NonFinite(_) => 1,
            Error::CacheInconsistent { .. } => 1,
            Error::InvalidWeights { .. } => 1,
            // everything else traces back to what the user asked for
            _ => 2,
        };
        CliError {
            code,
            message: err.to_string(),
        }
    }
}

/// Input files named on the command line must exist; a missing one is a
/// usage error, not an I/O failure.
pub fn require_file(path: &std::path::Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}
