//! Container engines, driven through their command-line interface.
//!
//! Docker and Podman accept the same subset of commands used here (`build`,
//! `run`, `image inspect`, `pull`, `push`), so either can be used.

use std::env;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::str::FromStr;

use log::{debug, info};
use thiserror::Error;
use walkdir::WalkDir;

use crate::manifest::ProjectManifest;
use crate::workflow::{self, journal, WorkflowKind, ENTRY_STEM, LOCK_FILE, PROJECT_ROOT_ENV};

pub const ENGINE_ENV: &str = "KERBLAM_CONTAINER_ENGINE";
/// Working directory of every workflow container.
pub const CONTAINER_WORKDIR: &str = "/kerblam";
pub const IMAGE_NAMESPACE: &str = "kerblam";
const LOG_EXCERPT_LINES: usize = 40;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("no usable container engine found (tried: {})", .0.join(", "))]
    EngineUnavailable(Vec<String>),
    #[error("building image {image} failed:\n{log}")]
    BuildFailed { image: String, log: String },
    #[error("image {0} is not available locally")]
    ImageNotFound(String),
    #[error("pulling image {image} failed: {message}")]
    ImagePullFailed { image: String, message: String },
    #[error("cannot prepare mount `{}`: {source}", path.display())]
    MountFailed {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid image reference `{0}`")]
    InvalidImageRef(String),
    #[error("cannot run {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// A container engine executable that answered a probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineHandle {
    pub name: String,
    pub executable: PathBuf,
}

impl EngineHandle {
    /// Resolves `name_or_path` (a bare name on `PATH`, or a path) and checks
    /// that `<engine> --version` succeeds.
    pub fn probe(name_or_path: &str) -> Option<Self> {
        let executable = which::which(name_or_path).ok()?;
        let ok = Command::new(&executable)
            .arg("--version")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|status| status.success())
            .unwrap_or(false);
        ok.then(|| Self {
            name: Path::new(name_or_path)
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| name_or_path.to_owned()),
            executable,
        })
    }

    fn command(&self) -> Command {
        Command::new(&self.executable)
    }

    fn capture(&self, args: &[&str]) -> Result<std::process::Output, ContainerError> {
        debug!("{} {}", self.name, args.join(" "));
        self.command()
            .args(args)
            .stdin(Stdio::null())
            .output()
            .map_err(|source| ContainerError::Spawn {
                program: self.executable.display().to_string(),
                source,
            })
    }
}

/// First engine in `preference` that is installed and working. The
/// `KERBLAM_CONTAINER_ENGINE` variable, when set, replaces the list.
pub fn detect_engine(preference: &[String]) -> Result<EngineHandle, ContainerError> {
    let from_env = env::var(ENGINE_ENV).ok().filter(|v| !v.trim().is_empty());
    detect_engine_with(preference, from_env.as_deref())
}

pub fn detect_engine_with(preference: &[String], override_engine: Option<&str>) -> Result<EngineHandle, ContainerError> {
    let candidates: Vec<String> = match override_engine {
        Some(engine) => vec![engine.to_owned()],
        None => preference.to_vec(),
    };
    candidates
        .iter()
        .find_map(|name| EngineHandle::probe(name))
        .ok_or(ContainerError::EngineUnavailable(candidates))
}

/// `kerblam/<project>:<workflow>`, optionally pinned to a digest.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub repository: String,
    pub tag: String,
    pub digest: Option<String>,
}

fn sanitize_component(raw: &str) -> String {
    let mut out = String::new();
    for c in raw.chars().flat_map(char::to_lowercase) {
        if c.is_ascii_lowercase() || c.is_ascii_digit() {
            out.push(c);
        } else if !out.ends_with('-') {
            out.push('-');
        }
    }
    let out = out.trim_matches('-').to_owned();
    if out.is_empty() {
        "project".to_owned()
    } else {
        out
    }
}

fn sanitize_tag(raw: &str) -> String {
    let mapped: String = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || matches!(c, '_' | '.' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect();
    let trimmed: String = mapped.trim_start_matches(['.', '-']).chars().take(128).collect();
    if trimmed.is_empty() {
        "latest".to_owned()
    } else {
        trimmed
    }
}

impl ImageRef {
    pub fn for_workflow(project: &str, workflow: &str) -> Self {
        Self {
            repository: format!("{IMAGE_NAMESPACE}/{}", sanitize_component(project)),
            tag: sanitize_tag(workflow),
            digest: None,
        }
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.repository, self.tag)?;
        if let Some(digest) = &self.digest {
            write!(f, "@{digest}")?;
        }
        Ok(())
    }
}

impl FromStr for ImageRef {
    type Err = ContainerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let invalid = || ContainerError::InvalidImageRef(s.to_owned());
        let (name, digest) = match s.split_once('@') {
            Some((name, digest)) if !digest.is_empty() => (name, Some(digest.to_owned())),
            Some(_) => return Err(invalid()),
            None => (s, None),
        };
        // The tag separator is the last colon after the last slash, so
        // registry ports are not mistaken for tags.
        let slash = name.rfind('/').map_or(0, |i| i + 1);
        let (repository, tag) = match name[slash..].rfind(':') {
            Some(idx) => (&name[..slash + idx], &name[slash + idx + 1..]),
            None => (name, "latest"),
        };
        if repository.is_empty() || tag.is_empty() || s.chars().any(char::is_whitespace) {
            return Err(invalid());
        }
        Ok(Self {
            repository: repository.to_owned(),
            tag: tag.to_owned(),
            digest,
        })
    }
}

/// Result of a successful build.
#[derive(Debug, Clone)]
pub struct BuiltImage {
    pub image: ImageRef,
    pub log: String,
}

/// Extra content for an image build: a workflow entry file baked into the
/// image as its default command.
#[derive(Debug, Clone)]
pub(crate) struct BakedEntry<'a> {
    pub kind: WorkflowKind,
    pub source: &'a Path,
}

/// Copies the project into `dest`, leaving out the data directory, version
/// control internals, kerblam's own state files and `extra_excluded`.
pub(crate) fn stage_context(manifest: &ProjectManifest, dest: &Path, extra_excluded: &[PathBuf]) -> Result<(), ContainerError> {
    let root = &manifest.root;
    let data = manifest.path(&manifest.data_dir);
    let skip = |path: &Path| -> bool {
        if path == data || extra_excluded.iter().any(|p| p == path) {
            return true;
        }
        let Ok(rel) = path.strip_prefix(root) else {
            return false;
        };
        let name = rel.to_string_lossy();
        matches!(name.as_ref(), ".git" | ".hg" | ".svn" | LOCK_FILE | journal::JOURNAL_DIR)
            || name.starts_with(ENTRY_STEM)
    };
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ContainerError::Io { path, source }
    };
    for entry in WalkDir::new(root)
        .follow_links(false)
        .min_depth(1)
        .into_iter()
        .filter_entry(|e| !skip(e.path()))
    {
        let entry = entry.map_err(|err| ContainerError::Io {
            path: root.clone(),
            source: err.into(),
        })?;
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let target = dest.join(rel);
        let file_type = entry.file_type();
        if file_type.is_dir() {
            fs::create_dir_all(&target).map_err(io_err(&target))?;
        } else if file_type.is_symlink() {
            #[cfg(unix)]
            {
                let link = fs::read_link(entry.path()).map_err(io_err(entry.path()))?;
                std::os::unix::fs::symlink(link, &target).map_err(io_err(&target))?;
            }
        } else if file_type.is_file() {
            fs::copy(entry.path(), &target).map_err(io_err(&target))?;
        }
    }
    Ok(())
}

fn excerpt(log: &str) -> String {
    let lines: Vec<&str> = log.lines().collect();
    let start = lines.len().saturating_sub(LOG_EXCERPT_LINES);
    lines[start..].join("\n")
}

/// Builds `recipe` with the filtered project as context and tags it per
/// [`ImageRef::for_workflow`]. Data files never enter the build context.
pub fn build_image(
    engine: &EngineHandle,
    recipe: &Path,
    manifest: &ProjectManifest,
    workflow: &str,
) -> Result<BuiltImage, ContainerError> {
    build_image_with(engine, recipe, manifest, workflow, None, &[])
}

pub(crate) fn build_image_with(
    engine: &EngineHandle,
    recipe: &Path,
    manifest: &ProjectManifest,
    workflow: &str,
    baked: Option<BakedEntry<'_>>,
    extra_excluded: &[PathBuf],
) -> Result<BuiltImage, ContainerError> {
    let image = ImageRef::for_workflow(&manifest.project_name(), workflow);
    let staging = tempfile::Builder::new()
        .prefix("kerblam-context-")
        .tempdir()
        .map_err(|source| ContainerError::Io {
            path: env::temp_dir(),
            source,
        })?;
    let context = staging.path().join("context");
    fs::create_dir_all(&context).map_err(|source| ContainerError::Io {
        path: context.clone(),
        source,
    })?;
    stage_context(manifest, &context, extra_excluded)?;

    let mut dockerfile = fs::read_to_string(recipe).map_err(|source| ContainerError::Io {
        path: recipe.to_path_buf(),
        source,
    })?;
    if let Some(baked) = baked {
        let entry = baked.kind.entry_file_name();
        let target = context.join(&entry);
        fs::copy(baked.source, &target).map_err(|source| ContainerError::Io {
            path: target.clone(),
            source,
        })?;
        let command: Vec<String> = baked.kind.command().iter().map(|arg| format!("{arg:?}")).collect();
        if !dockerfile.ends_with('\n') {
            dockerfile.push('\n');
        }
        dockerfile.push_str(&format!(
            "WORKDIR {CONTAINER_WORKDIR}\nCOPY {entry} {CONTAINER_WORKDIR}/{entry}\nCMD [{}]\n",
            command.join(", ")
        ));
    }
    let dockerfile_path = staging.path().join("Dockerfile");
    fs::write(&dockerfile_path, dockerfile).map_err(|source| ContainerError::Io {
        path: dockerfile_path.clone(),
        source,
    })?;

    let tag = image.to_string();
    info!("building {tag} with {}", engine.name);
    let output = engine.capture(&[
        "build",
        "-f",
        &dockerfile_path.to_string_lossy(),
        "-t",
        &tag,
        &context.to_string_lossy(),
    ])?;
    let mut log = String::from_utf8_lossy(&output.stdout).into_owned();
    log.push_str(&String::from_utf8_lossy(&output.stderr));
    if !output.status.success() {
        let mut excerpt = excerpt(&log);
        if excerpt.trim().is_empty() {
            excerpt = format!("{} exited with {}", engine.name, output.status);
        }
        return Err(ContainerError::BuildFailed { image: tag, log: excerpt });
    }
    Ok(BuiltImage { image, log })
}

pub fn image_exists(engine: &EngineHandle, image: &ImageRef) -> Result<bool, ContainerError> {
    Ok(engine
        .capture(&["image", "inspect", &image.to_string()])?
        .status
        .success())
}

pub fn pull_image(engine: &EngineHandle, image: &ImageRef) -> Result<(), ContainerError> {
    let output = engine.capture(&["pull", &image.to_string()])?;
    if output.status.success() {
        Ok(())
    } else {
        Err(ContainerError::ImagePullFailed {
            image: image.to_string(),
            message: excerpt(&String::from_utf8_lossy(&output.stderr)),
        })
    }
}

/// What the container executes.
#[derive(Debug, Clone, Copy)]
pub enum ContainerCommand<'a> {
    /// Mount this entry file read-only and run it according to its kind.
    Entry { kind: WorkflowKind, file: &'a Path },
    /// Run the image's own default command (replay packages).
    ImageDefault,
}

/// Host directories bind-mounted into the container, paired with their
/// container paths, parents first.
pub fn data_mounts(manifest: &ProjectManifest) -> Vec<(PathBuf, String)> {
    [&manifest.data_dir, &manifest.input_dir, &manifest.output_dir]
        .into_iter()
        .map(|dir| (manifest.path(dir), format!("{CONTAINER_WORKDIR}/{dir}")))
        .collect()
}

/// Runs a container with the data directories mounted under `/kerblam` and
/// returns the container's exit status. The container is removed on exit.
pub fn run_in_container(
    engine: &EngineHandle,
    image: &ImageRef,
    manifest: &ProjectManifest,
    command: ContainerCommand<'_>,
    env_vars: &[(String, String)],
    stdout_to_stderr: bool,
) -> Result<i32, ContainerError> {
    if !image_exists(engine, image)? {
        return Err(ContainerError::ImageNotFound(image.to_string()));
    }
    let mut args: Vec<String> = vec![
        "run".into(),
        "--rm".into(),
        "-w".into(),
        CONTAINER_WORKDIR.into(),
        "-e".into(),
        format!("{PROJECT_ROOT_ENV}={CONTAINER_WORKDIR}"),
    ];
    for (key, value) in env_vars {
        args.push("-e".into());
        args.push(format!("{key}={value}"));
    }
    for (host, target) in data_mounts(manifest) {
        fs::create_dir_all(&host).map_err(|source| ContainerError::MountFailed {
            path: host.clone(),
            source,
        })?;
        let host = fs::canonicalize(&host).map_err(|source| ContainerError::MountFailed {
            path: host.clone(),
            source,
        })?;
        args.push("-v".into());
        args.push(format!("{}:{target}", host.display()));
    }
    let tail: Vec<String> = match command {
        ContainerCommand::Entry { kind, file } => {
            let file = fs::canonicalize(file).map_err(|source| ContainerError::MountFailed {
                path: file.to_path_buf(),
                source,
            })?;
            args.push("-v".into());
            args.push(format!(
                "{}:{CONTAINER_WORKDIR}/{}:ro",
                file.display(),
                kind.entry_file_name()
            ));
            kind.command()
        }
        ContainerCommand::ImageDefault => Vec::new(),
    };
    args.push(image.to_string());
    args.extend(tail);
    info!("{} {}", engine.name, args.join(" "));
    let status = engine
        .command()
        .args(&args)
        .stdout(workflow::child_stdout(stdout_to_stderr))
        .status()
        .map_err(|source| ContainerError::Spawn {
            program: engine.executable.display().to_string(),
            source,
        })?;
    Ok(workflow::exit_code(status))
}
