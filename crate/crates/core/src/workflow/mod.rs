//! Workflow discovery and execution.
//!
//! Workflows live in the workflows directory as `<name>.makefile` (run with
//! `make`) or `<name>.sh` (run with `sh`). Before execution the chosen file is
//! copied to the project root under a reserved name so it runs as if it had
//! been written there; the copy is removed afterwards.

pub mod journal;
pub mod lock;

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{self, ContainerCommand, ContainerError, EngineHandle};
use crate::manifest::ProjectManifest;
use crate::relpath::RelPath;

pub use journal::{apply_profile, recover, revert_profile, SwapEntry, SwapJournal, SwapState};
pub use lock::{ProjectLock, LOCK_FILE};

pub const ENTRY_STEM: &str = ".kerblam_entry";
pub const RECIPE_EXTENSION: &str = "dockerfile";
pub const PROJECT_ROOT_ENV: &str = "KERBLAM_PROJECT_ROOT";
pub const PROFILE_ENV: &str = "KERBLAM_PROFILE";

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("more than one workflow is named `{0}`")]
    DuplicateWorkflowName(String),
    #[error("no workflow named `{0}`")]
    WorkflowNotFound(String),
    #[error("no workflow specified and no default is configured (available: {})", .0.join(", "))]
    NoDefaultWorkflow(Vec<String>),
    #[error("no profile named `{0}`")]
    UnknownProfile(String),
    #[error("profile file `{0}` does not exist")]
    ProfileFileMissing(RelPath),
    #[error("profile path `{0}` is not a regular file")]
    ProfileNotAFile(RelPath),
    #[error("cannot swap: `{0}` already exists")]
    HoldingPathOccupied(RelPath),
    #[error("a profile is already applied to this project")]
    SwapAlreadyApplied,
    #[error("no applied profile swap to revert")]
    JournalAbsent,
    #[error("profile swap journal is corrupt: {}", .0.join("; "))]
    JournalCorrupt(Vec<String>),
    #[error("project is locked by running process {pid}")]
    ProjectLocked { pid: u32 },
    #[error("workflow `{0}` has no container recipe")]
    NoRecipe(String),
    #[error("cannot start `{program}`: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("workflow exited with status {0}")]
    ExecutionFailed(i32),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkflowKind {
    Makefile,
    Shell,
}

impl WorkflowKind {
    pub fn from_extension(ext: &str) -> Option<Self> {
        match ext {
            "makefile" => Some(Self::Makefile),
            "sh" => Some(Self::Shell),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Makefile => "makefile",
            Self::Shell => "sh",
        }
    }

    /// Name of the materialized entry file at the project root.
    pub fn entry_file_name(self) -> String {
        format!("{ENTRY_STEM}.{}", self.extension())
    }

    /// Command line running the entry file from the project root.
    pub fn command(self) -> Vec<String> {
        let entry = self.entry_file_name();
        match self {
            Self::Makefile => vec!["make".into(), "-f".into(), entry],
            Self::Shell => vec!["sh".into(), entry],
        }
    }
}

impl fmt::Display for WorkflowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Makefile => "makefile",
            Self::Shell => "shell",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WorkflowDescriptor {
    pub name: String,
    pub kind: WorkflowKind,
    pub source: RelPath,
    pub recipe: Option<RelPath>,
}

/// Lists workflows sorted by name. A missing workflows directory is empty.
pub fn discover_workflows(manifest: &ProjectManifest) -> Result<Vec<WorkflowDescriptor>, WorkflowError> {
    let dir = manifest.path(&manifest.workflows_dir);
    let entries = match fs::read_dir(&dir) {
        Ok(entries) => entries,
        Err(err) if err.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(WorkflowError::Io { path: dir, source }),
    };
    let mut found: Vec<WorkflowDescriptor> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|source| WorkflowError::Io {
            path: dir.clone(),
            source,
        })?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let (Some(stem), Some(ext)) = (
            path.file_stem().and_then(|s| s.to_str()),
            path.extension().and_then(|s| s.to_str()),
        ) else {
            continue;
        };
        let Some(kind) = WorkflowKind::from_extension(ext) else {
            continue;
        };
        let file_name = format!("{stem}.{ext}");
        let source = manifest
            .workflows_dir
            .join(&RelPath::parse(&file_name).expect("file names are valid path segments"));
        let recipe = RelPath::parse(&format!("{stem}.{RECIPE_EXTENSION}"))
            .map(|name| manifest.recipes_dir.join(&name))
            .ok()
            .filter(|recipe| manifest.path(recipe).is_file());
        found.push(WorkflowDescriptor {
            name: stem.to_owned(),
            kind,
            source,
            recipe,
        });
    }
    found.sort_by(|a, b| a.name.cmp(&b.name));
    if let Some(pair) = found.windows(2).find(|w| w[0].name == w[1].name) {
        return Err(WorkflowError::DuplicateWorkflowName(pair[0].name.clone()));
    }
    Ok(found)
}

/// Picks the workflow to run: the named one, else the manifest default, else
/// the only workflow if there is exactly one.
pub fn resolve_workflow(manifest: &ProjectManifest, name: Option<&str>) -> Result<WorkflowDescriptor, WorkflowError> {
    let workflows = discover_workflows(manifest)?;
    let wanted = match name.or(manifest.execution.default_workflow.as_deref()) {
        Some(name) => name.to_owned(),
        None => match workflows.as_slice() {
            [only] => return Ok(only.clone()),
            _ => {
                return Err(WorkflowError::NoDefaultWorkflow(
                    workflows.into_iter().map(|w| w.name).collect(),
                ))
            }
        },
    };
    workflows
        .into_iter()
        .find(|w| w.name == wanted)
        .ok_or(WorkflowError::WorkflowNotFound(wanted))
}

/// The workflow file copied to the project root; removed on drop.
#[derive(Debug)]
pub struct EntryFile {
    path: PathBuf,
    removed: bool,
}

impl EntryFile {
    pub fn materialize(manifest: &ProjectManifest, workflow: &WorkflowDescriptor) -> Result<Self, WorkflowError> {
        let path = manifest.root.join(workflow.kind.entry_file_name());
        let tmp = manifest.root.join(format!("{}.tmp", workflow.kind.entry_file_name()));
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| WorkflowError::Io { path, source }
        };
        fs::copy(manifest.path(&workflow.source), &tmp).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        Ok(Self {
            path,
            removed: false,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn remove(mut self) -> Result<(), WorkflowError> {
        self.removed = true;
        fs::remove_file(&self.path).map_err(|source| WorkflowError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

impl Drop for EntryFile {
    fn drop(&mut self) {
        if !self.removed {
            let _ = fs::remove_file(&self.path);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub profile: Option<String>,
    pub containerized: bool,
    /// Engine to use instead of auto-detection.
    pub engine: Option<EngineHandle>,
    /// Send the workflow's standard output to standard error, keeping
    /// standard output free for machine-readable reports.
    pub stdout_to_stderr: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub workflow: String,
    pub kind: WorkflowKind,
    pub profile: Option<String>,
    pub containerized: bool,
    pub image: Option<String>,
    /// A swap journal from an earlier interrupted run was reverted first.
    pub recovered_swap: bool,
    pub status: i32,
}

/// Exit status of a finished child, with signals mapped to `128 + signal`.
pub fn exit_code(status: std::process::ExitStatus) -> i32 {
    if let Some(code) = status.code() {
        return code;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(signal) = status.signal() {
            return 128 + signal;
        }
    }
    1
}

pub(crate) fn child_stdout(to_stderr: bool) -> Stdio {
    #[cfg(unix)]
    if to_stderr {
        use std::os::fd::AsFd;
        if let Ok(fd) = io::stderr().as_fd().try_clone_to_owned() {
            return Stdio::from(fd);
        }
    }
    let _ = to_stderr;
    Stdio::inherit()
}

/// Runs a workflow at the project root, optionally inside a container and
/// with an input profile swapped in.
///
/// The entry file, the profile swap and the project lock are undone on every
/// exit path, including a failing child. A nonzero child status is reported
/// as [`WorkflowError::ExecutionFailed`] after cleanup.
pub fn run(manifest: &ProjectManifest, workflow: Option<&str>, options: &RunOptions) -> Result<RunOutcome, WorkflowError> {
    let workflow = resolve_workflow(manifest, workflow)?;
    if let Some(profile) = &options.profile {
        if !manifest.profiles.contains_key(profile) {
            return Err(WorkflowError::UnknownProfile(profile.clone()));
        }
    }
    let lock = ProjectLock::acquire(&manifest.root)?;

    let recovered_swap = match journal::recover(&manifest.root)? {
        Some(stale) => {
            warn!(
                "reverted profile `{}` left applied by an interrupted run",
                stale.profile.as_deref().unwrap_or("?")
            );
            true
        }
        None => false,
    };
    for kind in [WorkflowKind::Makefile, WorkflowKind::Shell] {
        let _ = fs::remove_file(manifest.root.join(kind.entry_file_name()));
    }

    let engine = if options.containerized {
        if workflow.recipe.is_none() {
            return Err(WorkflowError::NoRecipe(workflow.name.clone()));
        }
        Some(match &options.engine {
            Some(engine) => engine.clone(),
            None => container::detect_engine(&manifest.execution.engines)?,
        })
    } else {
        None
    };

    let mut swap = match &options.profile {
        Some(profile) => Some(apply_profile(manifest, profile)?),
        None => None,
    };

    let result = (|| {
        let entry = EntryFile::materialize(manifest, &workflow)?;
        let executed = execute(manifest, &workflow, entry.path(), engine.as_ref(), options);
        let removed = entry.remove();
        let executed = executed?;
        removed?;
        Ok::<_, WorkflowError>(executed)
    })();

    let reverted = match swap.as_mut() {
        Some(journal) => revert_profile(journal),
        None => Ok(()),
    };
    let released = lock.release();

    let (status, image) = match (result, reverted) {
        (Ok(done), Ok(())) => done,
        (Ok(_), Err(err)) => return Err(err),
        (Err(err), revert) => {
            if let Err(revert) = revert {
                log::error!("failed to revert profile: {revert}");
            }
            return Err(err);
        }
    };
    released?;
    if status != 0 {
        return Err(WorkflowError::ExecutionFailed(status));
    }
    Ok(RunOutcome {
        workflow: workflow.name,
        kind: workflow.kind,
        profile: options.profile.clone(),
        containerized: options.containerized,
        image,
        recovered_swap,
        status,
    })
}

fn execute(
    manifest: &ProjectManifest,
    workflow: &WorkflowDescriptor,
    entry: &Path,
    engine: Option<&EngineHandle>,
    options: &RunOptions,
) -> Result<(i32, Option<String>), WorkflowError> {
    let profile = options.profile.clone().unwrap_or_default();
    if let Some(engine) = engine {
        let recipe = workflow.recipe.as_ref().expect("checked by the caller");
        let built = container::build_image(engine, &manifest.path(recipe), manifest, &workflow.name)?;
        info!("built {}", built.image);
        let status = container::run_in_container(
            engine,
            &built.image,
            manifest,
            ContainerCommand::Entry {
                kind: workflow.kind,
                file: entry,
            },
            &[(PROFILE_ENV.to_owned(), profile)],
            options.stdout_to_stderr,
        )?;
        return Ok((status, Some(built.image.to_string())));
    }

    let argv = workflow.kind.command();
    info!("running `{}` in {}", argv.join(" "), manifest.root.display());
    let status = Command::new(&argv[0])
        .args(&argv[1..])
        .current_dir(&manifest.root)
        .env(PROJECT_ROOT_ENV, &manifest.root)
        .env(PROFILE_ENV, &profile)
        .stdout(child_stdout(options.stdout_to_stderr))
        .status()
        .map_err(|source| WorkflowError::Spawn {
            program: argv[0].clone(),
            source,
        })?;
    Ok((exit_code(status), None))
}
