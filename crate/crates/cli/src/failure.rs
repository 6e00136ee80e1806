use std::fmt;
use std::process::ExitCode;

/// Why a command failed, mapped onto the exit status.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config, or input files. Exit status 1.
    Validation(String),
    /// A computation produced non-finite values or missed its tolerance. Exit status 2.
    Numeric(String),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Failure::Validation(_) => ExitCode::from(1),
            Failure::Numeric(_) => ExitCode::from(2),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            Failure::Validation(m) | Failure::Numeric(m) => m,
        };
        // Diagnostics stay on one line.
        write!(f, "{}", msg.replace('\n', " "))
    }
}

impl From<sfs_core::Error> for Failure {
    fn from(e: sfs_core::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Validation(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Validation(e.to_string())
    }
}
