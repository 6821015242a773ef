//! Replay packages: a container image with the workflow baked in, plus a
//! tarball holding `replay.toml` and every precious input.
//!
//! Remote inputs are not shipped; `replay.toml` lists them so a replay can
//! download them again. Code travels in the image, data in the tarball.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use chrono::{DateTime, SecondsFormat, Utc};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{self, ArchiveEntry, HashingWriter};
use crate::container::{self, BakedEntry, ContainerCommand, ContainerError, EngineHandle, ImageRef};
use crate::data::{self, DataError, FetchOptions, PackSelection, Transport};
use crate::manifest::{is_sha256_hex, ProjectManifest, RemoteFile, MANIFEST_FILE};
use crate::relpath::RelPath;
use crate::workflow::{self, WorkflowDescriptor, WorkflowError, WorkflowKind, PROFILE_ENV};

pub const REPLAY_MANIFEST: &str = "replay.toml";
pub const FORMAT_VERSION: i64 = 1;
pub const SOURCE_DATE_EPOCH: &str = "SOURCE_DATE_EPOCH";

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("workflow `{0}` has no container recipe")]
    NoRecipe(String),
    #[error("unsupported replay package format version {0} (this build reads version {FORMAT_VERSION})")]
    UnsupportedFormatVersion(i64),
    #[error("checksum mismatch for packaged file `{path}`")]
    ChecksumMismatch { path: RelPath },
    #[error("invalid replay package: {0}")]
    InvalidPackage(String),
    #[error("replay directory {} is not empty", .0.display())]
    WorkdirNotEmpty(PathBuf),
    #[error("fetching remote inputs failed: {}", .0.join("; "))]
    FetchFailed(Vec<String>),
    #[error("replayed workflow exited with status {0}")]
    ExecutionFailed(i32),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> PackageError {
    let path = path.into();
    move |source| PackageError::Io { path, source }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayLayout {
    pub data: RelPath,
    pub input: RelPath,
    pub output: RelPath,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreciousFile {
    /// Input-relative.
    pub path: RelPath,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteEntry {
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

/// Contents of `replay.toml`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayManifest {
    pub format_version: i64,
    pub image: String,
    pub workflow: String,
    pub workflow_kind: WorkflowKind,
    /// RFC 3339 UTC; the newest modification time among the packaged
    /// sources, or `SOURCE_DATE_EPOCH` when set.
    pub created: String,
    pub layout: ReplayLayout,
    #[serde(default)]
    pub precious_files: Vec<PreciousFile>,
    #[serde(default)]
    pub remote_files: BTreeMap<RelPath, RemoteEntry>,
}

impl ReplayManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("replay manifest serialization cannot fail")
    }

    pub fn parse(text: &str) -> Result<Self, PackageError> {
        let table: toml::Table = text
            .parse()
            .map_err(|err: toml::de::Error| PackageError::InvalidPackage(err.message().to_owned()))?;
        match table.get("format_version").and_then(toml::Value::as_integer) {
            Some(FORMAT_VERSION) => {}
            Some(other) => return Err(PackageError::UnsupportedFormatVersion(other)),
            None => {
                return Err(PackageError::InvalidPackage(format!(
                    "{REPLAY_MANIFEST} has no integer format_version"
                )))
            }
        }
        let manifest: Self = toml::from_str(text)
            .map_err(|err| PackageError::InvalidPackage(err.message().trim_end().to_owned()))?;
        manifest.project(Path::new("."))?;
        for file in &manifest.precious_files {
            if !is_sha256_hex(&file.sha256) {
                return Err(PackageError::InvalidPackage(format!(
                    "bad checksum for `{}`",
                    file.path
                )));
            }
        }
        manifest
            .image
            .parse::<ImageRef>()
            .map_err(|err| PackageError::InvalidPackage(err.to_string()))?;
        Ok(manifest)
    }

    /// A project manifest rooted at `root` with the packaged layout and
    /// remote inputs.
    pub fn project(&self, root: &Path) -> Result<ProjectManifest, PackageError> {
        let mut manifest = ProjectManifest::new(root);
        manifest.data_dir = self.layout.data.clone();
        manifest.input_dir = self.layout.input.clone();
        manifest.output_dir = self.layout.output.clone();
        manifest.remote_files = self
            .remote_files
            .iter()
            .map(|(path, remote)| {
                (
                    path.clone(),
                    RemoteFile {
                        url: remote.url.clone(),
                        sha256: remote.sha256.clone(),
                    },
                )
            })
            .collect();
        manifest
            .validate()
            .map_err(|err| PackageError::InvalidPackage(err.to_string()))?;
        Ok(manifest)
    }

    /// Project-relative archive paths of the precious files.
    fn archive_paths(&self) -> BTreeMap<RelPath, &PreciousFile> {
        self.precious_files
            .iter()
            .map(|file| (self.layout.input.join(&file.path), file))
            .collect()
    }
}

fn mtime_secs(path: &Path) -> Option<i64> {
    let modified = fs::metadata(path).ok()?.modified().ok()?;
    let secs = modified.duration_since(UNIX_EPOCH).ok()?.as_secs();
    i64::try_from(secs).ok()
}

fn created_stamp(sources: &[PathBuf]) -> String {
    let secs = std::env::var(SOURCE_DATE_EPOCH)
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .or_else(|| sources.iter().filter_map(|p| mtime_secs(p)).max())
        .unwrap_or_else(|| {
            SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs() as i64)
                .unwrap_or(0)
        });
    DateTime::<Utc>::from_timestamp(secs, 0)
        .unwrap_or_default()
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}

/// Writes the replay tarball for `workflow` (no engine involved).
pub fn write_replay_archive(
    manifest: &ProjectManifest,
    workflow: &WorkflowDescriptor,
    image: &ImageRef,
    dest: &Path,
) -> Result<ReplayManifest, PackageError> {
    let precious = data::select(manifest, PackSelection::Precious);
    let mut files = Vec::with_capacity(precious.len());
    let mut entries = Vec::with_capacity(precious.len() + 1);
    let mut sources = vec![manifest.root.join(MANIFEST_FILE), manifest.path(&workflow.source)];
    if let Some(recipe) = &workflow.recipe {
        sources.push(manifest.path(recipe));
    }
    for record in &precious {
        let abs = manifest.path(&record.path);
        let sha256 = archive::sha256_file(&abs).map_err(io_err(&abs))?;
        files.push(PreciousFile {
            path: record
                .path
                .strip_prefix(&manifest.input_dir)
                .expect("precious files are inputs"),
            sha256,
        });
        entries.push(ArchiveEntry::file(record.path.to_string(), &abs));
        sources.push(abs);
    }
    let replay = ReplayManifest {
        format_version: FORMAT_VERSION,
        image: image.to_string(),
        workflow: workflow.name.clone(),
        workflow_kind: workflow.kind,
        created: created_stamp(&sources),
        layout: ReplayLayout {
            data: manifest.data_dir.clone(),
            input: manifest.input_dir.clone(),
            output: manifest.output_dir.clone(),
        },
        precious_files: files,
        remote_files: manifest
            .remote_files
            .iter()
            .map(|(path, remote)| {
                (
                    path.clone(),
                    RemoteEntry {
                        url: remote.url.clone(),
                        sha256: remote.sha256.clone(),
                    },
                )
            })
            .collect(),
    };
    entries.insert(0, ArchiveEntry::bytes(REPLAY_MANIFEST, replay.to_toml().into_bytes()));
    archive::write_tar_gz(dest, &entries).map_err(io_err(dest))?;
    Ok(replay)
}

#[derive(Debug, Clone, Serialize)]
pub struct PackageOutcome {
    pub workflow: String,
    pub image: String,
    pub archive: PathBuf,
    pub precious_files: Vec<RelPath>,
}

/// Builds the workflow's image with its entry baked in as the default
/// command and writes the replay tarball to `dest`.
pub fn package(
    manifest: &ProjectManifest,
    workflow: Option<&str>,
    dest: &Path,
    engine: &EngineHandle,
) -> Result<PackageOutcome, PackageError> {
    let workflow = workflow::resolve_workflow(manifest, workflow)?;
    let recipe = workflow
        .recipe
        .clone()
        .ok_or_else(|| PackageError::NoRecipe(workflow.name.clone()))?;
    let dest_abs = if dest.is_absolute() {
        dest.to_path_buf()
    } else {
        std::env::current_dir().map_err(io_err("."))?.join(dest)
    };
    let built = container::build_image_with(
        engine,
        &manifest.path(&recipe),
        manifest,
        &workflow.name,
        Some(BakedEntry {
            kind: workflow.kind,
            source: &manifest.path(&workflow.source),
        }),
        &[dest_abs],
    )?;
    info!("built {}", built.image);
    let replay = write_replay_archive(manifest, &workflow, &built.image, dest)?;
    Ok(PackageOutcome {
        workflow: workflow.name,
        image: replay.image,
        archive: dest.to_path_buf(),
        precious_files: replay
            .precious_files
            .iter()
            .map(|f| manifest.input_dir.join(&f.path))
            .collect(),
    })
}

/// Reads and verifies a replay tarball without writing anything: the
/// manifest must be supported and every precious file must be present with
/// its recorded checksum.
pub fn inspect(archive_path: &Path) -> Result<ReplayManifest, PackageError> {
    let mut archive = archive::open_tar_gz(archive_path).map_err(io_err(archive_path))?;
    let mut manifest_text = None;
    let mut digests: BTreeMap<RelPath, String> = BTreeMap::new();
    let invalid = |msg: String| PackageError::InvalidPackage(msg);
    for entry in archive.entries().map_err(io_err(archive_path))? {
        let mut entry = entry.map_err(io_err(archive_path))?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            continue_or_reject(&entry)?;
            continue;
        }
        let name = entry.path().map_err(io_err(archive_path))?.to_string_lossy().into_owned();
        if name == REPLAY_MANIFEST {
            let mut text = String::new();
            entry
                .read_to_string(&mut text)
                .map_err(|_| invalid(format!("{REPLAY_MANIFEST} is not UTF-8")))?;
            manifest_text = Some(text);
            continue;
        }
        let rel = RelPath::parse(&name).map_err(|err| invalid(format!("unsafe entry `{name}`: {err}")))?;
        let digest = archive::sha256_reader(&mut entry).map_err(io_err(archive_path))?;
        if digests.insert(rel.clone(), digest).is_some() {
            return Err(invalid(format!("duplicate entry `{rel}`")));
        }
    }
    let text = manifest_text.ok_or_else(|| invalid(format!("missing {REPLAY_MANIFEST}")))?;
    let replay = ReplayManifest::parse(&text)?;
    let expected = replay.archive_paths();
    for path in digests.keys() {
        if !expected.contains_key(path) {
            return Err(invalid(format!("unexpected entry `{path}`")));
        }
    }
    for (path, file) in &expected {
        match digests.get(path) {
            None => return Err(invalid(format!("missing precious file `{path}`"))),
            Some(actual) if actual != &file.sha256 => {
                return Err(PackageError::ChecksumMismatch { path: path.clone() })
            }
            Some(_) => {}
        }
    }
    Ok(replay)
}

fn continue_or_reject<R: Read>(entry: &tar::Entry<'_, R>) -> Result<(), PackageError> {
    match entry.header().entry_type() {
        tar::EntryType::Directory | tar::EntryType::XGlobalHeader | tar::EntryType::XHeader => Ok(()),
        other => Err(PackageError::InvalidPackage(format!(
            "unsupported entry type {other:?}"
        ))),
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReplayOptions {
    /// Verify the package and report what would happen, writing nothing.
    pub dry_run: bool,
    pub fetch: FetchOptions,
    pub stdout_to_stderr: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayOutcome {
    pub dry_run: bool,
    pub workdir: PathBuf,
    pub image: String,
    pub workflow: String,
    pub extracted: Vec<RelPath>,
    pub remote_files: Vec<RelPath>,
    pub status: i32,
}

fn ensure_empty_dir(dir: &Path) -> Result<bool, PackageError> {
    match fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                Err(PackageError::WorkdirNotEmpty(dir.to_path_buf()))
            } else {
                Ok(true)
            }
        }
        Err(err) if err.kind() == io::ErrorKind::NotFound => Ok(false),
        Err(err) => Err(io_err(dir)(err)),
    }
}

/// Recreates the packaged project in `workdir` (which must be empty or
/// absent) and runs the packaged image on it.
pub fn replay(
    archive_path: &Path,
    workdir: &Path,
    engine: Option<&EngineHandle>,
    transport: &dyn Transport,
    options: &ReplayOptions,
) -> Result<ReplayOutcome, PackageError> {
    ensure_empty_dir(workdir)?;
    let replay = inspect(archive_path)?;
    let mut outcome = ReplayOutcome {
        dry_run: options.dry_run,
        workdir: workdir.to_path_buf(),
        image: replay.image.clone(),
        workflow: replay.workflow.clone(),
        extracted: replay.archive_paths().into_keys().collect(),
        remote_files: replay.remote_files.keys().cloned().collect(),
        status: 0,
    };
    if options.dry_run {
        return Ok(outcome);
    }
    let image: ImageRef = replay.image.parse()?;
    let engine = match engine {
        Some(engine) => engine.clone(),
        None => container::detect_engine(&crate::manifest::ExecutionOptions::default().engines)?,
    };

    fs::create_dir_all(workdir).map_err(io_err(workdir))?;
    let workdir = fs::canonicalize(workdir).map_err(io_err(workdir))?;
    outcome.workdir = workdir.clone();
    let project = replay.project(&workdir)?;
    fs::write(workdir.join(MANIFEST_FILE), project.to_toml()).map_err(io_err(workdir.join(MANIFEST_FILE)))?;
    for dir in [&project.data_dir, &project.input_dir, &project.output_dir] {
        fs::create_dir_all(project.path(dir)).map_err(io_err(project.path(dir)))?;
    }
    extract(archive_path, &replay, &workdir)?;

    if !project.remote_files.is_empty() {
        let report = data::fetch(&project, transport, options.fetch);
        if !report.is_success() {
            return Err(PackageError::FetchFailed(
                report.failures().map(|f| f.to_string()).collect(),
            ));
        }
    }

    if !container::image_exists(&engine, &image)? {
        warn!("{image} not found locally, pulling");
        container::pull_image(&engine, &image)?;
    }
    let status = container::run_in_container(
        &engine,
        &image,
        &project,
        ContainerCommand::ImageDefault,
        &[(PROFILE_ENV.to_owned(), String::new())],
        options.stdout_to_stderr,
    )?;
    outcome.status = status;
    if status != 0 {
        return Err(PackageError::ExecutionFailed(status));
    }
    Ok(outcome)
}

fn extract(archive_path: &Path, replay: &ReplayManifest, workdir: &Path) -> Result<(), PackageError> {
    let expected = replay.archive_paths();
    let mut seen = BTreeSet::new();
    let mut archive = archive::open_tar_gz(archive_path).map_err(io_err(archive_path))?;
    for entry in archive.entries().map_err(io_err(archive_path))? {
        let mut entry = entry.map_err(io_err(archive_path))?;
        if entry.header().entry_type() != tar::EntryType::Regular {
            continue;
        }
        let name = entry.path().map_err(io_err(archive_path))?.to_string_lossy().into_owned();
        if name == REPLAY_MANIFEST {
            continue;
        }
        let rel = RelPath::parse(&name).map_err(|err| PackageError::InvalidPackage(err.to_string()))?;
        let file = expected
            .get(&rel)
            .ok_or_else(|| PackageError::InvalidPackage(format!("unexpected entry `{rel}`")))?;
        let dest = rel.to_path(workdir);
        let parent = dest.parent().expect("entries have a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let tmp = tempfile::NamedTempFile::new_in(parent).map_err(io_err(parent))?;
        let mut writer = HashingWriter::new(tmp);
        io::copy(&mut entry, &mut writer).map_err(io_err(&dest))?;
        let (mut tmp, digest, _) = writer.finish();
        tmp.flush().map_err(io_err(&dest))?;
        if digest != file.sha256 {
            return Err(PackageError::ChecksumMismatch { path: rel });
        }
        tmp.persist(&dest).map_err(|err| io_err(&dest)(err.error))?;
        seen.insert(rel);
    }
    if seen.len() != expected.len() {
        return Err(PackageError::InvalidPackage("archive changed while replaying".into()));
    }
    Ok(())
}
