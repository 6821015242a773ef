//! Downloading remote inputs.

use std::fs;
use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;

use crate::archive::{self, HashingWriter};
use crate::manifest::{ProjectManifest, RemoteFile};
use crate::relpath::RelPath;

pub const DEFAULT_FETCH_JOBS: usize = 4;
const MAX_REDIRECTS: u32 = 5;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("server answered with status {0}")]
    Status(u16),
    #[error("{0}")]
    Other(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Retrieves the body behind a URL into a sink.
pub trait Transport: Sync {
    fn retrieve(&self, url: &str, sink: &mut dyn Write) -> Result<(), TransportError>;
}

/// HTTP(S) GET, following up to five redirects.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new() -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .max_redirects(MAX_REDIRECTS)
            .http_status_as_error(false)
            .build()
            .into();
        Self { agent }
    }
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::new()
    }
}

impl Transport for HttpTransport {
    fn retrieve(&self, url: &str, sink: &mut dyn Write) -> Result<(), TransportError> {
        let response = self
            .agent
            .get(url)
            .call()
            .map_err(|err| TransportError::Other(err.to_string()))?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            return Err(TransportError::Status(status));
        }
        let mut reader = response.into_body().into_reader();
        io::copy(&mut reader, sink)?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum FetchFileError {
    #[error("failed to fetch `{path}`: {cause}")]
    RemoteFetchFailed { path: RelPath, cause: String },
    #[error("checksum mismatch for `{path}`: expected {expected}, got {actual}")]
    ChecksumMismatch {
        path: RelPath,
        expected: String,
        actual: String,
    },
    #[error("cannot write `{path}`: {source}")]
    Io {
        path: RelPath,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FetchStatus {
    Downloaded { bytes: u64, sha256: String },
    /// The destination was already present (and matched its checksum, if one
    /// is declared); no request was made.
    Skipped,
    Failed {
        #[serde(serialize_with = "display")]
        error: FetchFileError,
    },
}

fn display<S: serde::Serializer>(value: &FetchFileError, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(value)
}

#[derive(Debug, Serialize)]
pub struct FetchOutcome {
    pub path: RelPath,
    pub url: String,
    #[serde(flatten)]
    pub status: FetchStatus,
}

/// Per-file outcomes in path order.
#[derive(Debug, Default, Serialize)]
pub struct FetchReport {
    pub outcomes: Vec<FetchOutcome>,
}

impl FetchReport {
    pub fn failures(&self) -> impl Iterator<Item = &FetchFileError> {
        self.outcomes.iter().filter_map(|o| match &o.status {
            FetchStatus::Failed { error } => Some(error),
            _ => None,
        })
    }

    pub fn is_success(&self) -> bool {
        self.failures().next().is_none()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FetchOptions {
    /// Maximum number of concurrent downloads.
    pub jobs: usize,
    /// Download even when a file without a declared checksum is present.
    pub force: bool,
}

impl Default for FetchOptions {
    fn default() -> Self {
        Self {
            jobs: DEFAULT_FETCH_JOBS,
            force: false,
        }
    }
}

/// Downloads every declared remote input into the input directory.
///
/// Each file is written to a temporary sibling and renamed into place only
/// once fully retrieved (and checksum-verified), so a failure never leaves a
/// partial destination behind.
pub fn fetch(manifest: &ProjectManifest, transport: &dyn Transport, options: FetchOptions) -> FetchReport {
    let work: Vec<(&RelPath, &RemoteFile)> = manifest.remote_files.iter().collect();
    let slots: Vec<Mutex<Option<FetchStatus>>> = work.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let jobs = options.jobs.clamp(1, work.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some((path, remote)) = work.get(idx) else {
                    break;
                };
                let status = fetch_one(manifest, path, remote, transport, options.force);
                *slots[idx].lock().expect("fetch slot poisoned") = Some(status);
            });
        }
    });

    let outcomes = work
        .into_iter()
        .zip(slots)
        .map(|((path, remote), slot)| FetchOutcome {
            path: path.clone(),
            url: remote.url.clone(),
            status: slot
                .into_inner()
                .expect("fetch slot poisoned")
                .expect("every slot is filled"),
        })
        .collect();
    FetchReport { outcomes }
}

fn fetch_one(
    manifest: &ProjectManifest,
    path: &RelPath,
    remote: &RemoteFile,
    transport: &dyn Transport,
    force: bool,
) -> FetchStatus {
    let dest = manifest.input_path(path);
    let io_err = |source| FetchStatus::Failed {
        error: FetchFileError::Io {
            path: path.clone(),
            source,
        },
    };
    if dest.is_file() {
        match &remote.sha256 {
            Some(expected) => match archive::sha256_file(&dest) {
                Ok(actual) if &actual == expected => return FetchStatus::Skipped,
                Ok(_) => {}
                Err(err) => return io_err(err),
            },
            None if !force => return FetchStatus::Skipped,
            None => {}
        }
    }
    let parent = dest.parent().expect("input paths have a parent");
    if let Err(err) = fs::create_dir_all(parent) {
        return io_err(err);
    }
    let tmp = match tempfile::Builder::new()
        .prefix(".kerblam-fetch-")
        .tempfile_in(parent)
    {
        Ok(tmp) => tmp,
        Err(err) => return io_err(err),
    };
    let mut writer = HashingWriter::new(tmp);
    if let Err(err) = transport.retrieve(&remote.url, &mut writer) {
        return FetchStatus::Failed {
            error: FetchFileError::RemoteFetchFailed {
                path: path.clone(),
                cause: err.to_string(),
            },
        };
    }
    let (mut tmp, sha256, bytes) = writer.finish();
    if let Err(err) = tmp.flush() {
        return io_err(err);
    }
    if let Some(expected) = &remote.sha256 {
        if expected != &sha256 {
            return FetchStatus::Failed {
                error: FetchFileError::ChecksumMismatch {
                    path: path.clone(),
                    expected: expected.clone(),
                    actual: sha256,
                },
            };
        }
    }
    match tmp.persist(&dest) {
        Ok(_) => FetchStatus::Downloaded { bytes, sha256 },
        Err(err) => io_err(err.error),
    }
}
