//! Project manager for data-analysis repositories.
//!
//! A directory containing a `kerblam.toml` manifest is a managed project. The
//! crate classifies the files under its data directory, fetches remote inputs,
//! cleans recreatable data, runs workflows (optionally inside a container) with
//! hot-swappable input profiles, and exports replay packages. The [`census`]
//! module analyses the structure of many project templates.

pub mod archive;
pub mod census;
pub mod cli;
pub mod container;
pub mod data;
pub mod error;
pub mod manifest;
pub mod package;
pub mod relpath;
pub mod workflow;

pub use error::Error;
pub use manifest::{find_project, parse_manifest, ProjectManifest};
pub use relpath::RelPath;
