//! Command-line front end: file formats, reports and the subcommands of the
//! `mcmle` binary.
//!
//! Exit codes are 0 on success, 1 on input or other errors and 3 when an
//! optimizer fails to converge.

pub mod commands;
pub mod io;
pub mod report;

use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Input(String),

    #[error(transparent)]
    Core(#[from] mcmle::Error),

    #[error("could not serialize output: {0}")]
    Serialize(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(mcmle::Error::StudyFailed { .. }) => EXIT_NOT_CONVERGED,
            _ => EXIT_ERROR,
        }
    }
}

/// Result of a command that ran to completion: outputs were written, but a
/// fit may not have converged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    NotConverged,
}

impl Outcome {
    pub fn exit_code(self) -> u8 {
        match self {
            Outcome::Done => EXIT_OK,
            Outcome::NotConverged => EXIT_NOT_CONVERGED,
        }
    }
}
