//! Crate-wide error type and its mapping to process exit codes.

use thiserror::Error;

use crate::census::CensusError;
use crate::cli::CliError;
use crate::container::ContainerError;
use crate::data::DataError;
use crate::manifest::ManifestError;
use crate::package::PackageError;
use crate::workflow::WorkflowError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Package(#[from] PackageError),
    #[error(transparent)]
    Census(#[from] CensusError),
    #[error(transparent)]
    Cli(#[from] CliError),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    /// Machine-readable name of the error variant, used in JSON reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Manifest(_) => "manifest",
            Error::Data(_) => "data",
            Error::Workflow(_) => "workflow",
            Error::Container(_) => "container",
            Error::Package(_) => "package",
            Error::Census(_) => "census",
            Error::Cli(_) => "cli",
            Error::Usage(_) => "usage",
        }
    }

    /// A failing child's status passes through when it is in `1..=125`;
    /// anything else a child reports becomes 1.
    pub fn exit_code(&self) -> i32 {
        let child = match self {
            Error::Usage(_) => return EXIT_USAGE,
            Error::Workflow(WorkflowError::ExecutionFailed(status)) => *status,
            Error::Package(PackageError::ExecutionFailed(status)) => *status,
            _ => return EXIT_FAILURE,
        };
        if (1..=125).contains(&child) {
            child
        } else {
            EXIT_FAILURE
        }
    }
}
