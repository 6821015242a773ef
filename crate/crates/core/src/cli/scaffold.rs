//! `kerblam new`: the default project skeleton.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use super::CliError;

/// Paths created by [`scaffold_new`], directories with a trailing `/`.
pub const SKELETON: [&str; 6] = [
    "README.md",
    "data/in/",
    "data/out/",
    "kerblam.toml",
    "src/dockerfiles/",
    "src/workflows/",
];

const MANIFEST_TEMPLATE: &str = "\
[meta]
version = 1

# Layout defaults, shown for reference:
# [data]
# dir = \"data\"
# input = \"data/in\"
# output = \"data/out\"
#
# [code]
# workflows = \"src/workflows\"
# dockerfiles = \"src/dockerfiles\"

# Remote inputs, relative to the input directory:
# [data.remote]
# \"table.csv\" = \"https://example.org/table.csv\"
";

/// Creates the skeleton in `dir` (absent or empty) and initializes a git
/// repository there when `git` is installed. Returns the created paths.
pub fn scaffold_new(dir: &Path, project_name: &str) -> Result<Vec<String>, CliError> {
    match fs::read_dir(dir) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                return Err(CliError::TargetNotEmpty(dir.to_path_buf()));
            }
        }
        Err(err) if err.kind() == io::ErrorKind::NotFound => {}
        Err(source) => {
            return Err(CliError::Io {
                path: dir.to_path_buf(),
                source,
            })
        }
    }
    let io_err = |path: PathBuf| move |source| CliError::Io { path, source };
    for entry in SKELETON {
        let path = dir.join(entry.trim_end_matches('/'));
        if entry.ends_with('/') {
            fs::create_dir_all(&path).map_err(io_err(path.clone()))?;
            continue;
        }
        let body = match entry {
            "kerblam.toml" => MANIFEST_TEMPLATE.to_owned(),
            _ => format!("# {project_name}\n"),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent.to_path_buf()))?;
        }
        fs::write(&path, body).map_err(io_err(path.clone()))?;
    }
    if which::which("git").is_ok() {
        let status = Command::new("git")
            .arg("init")
            .arg("--quiet")
            .arg(dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status();
        if !matches!(status, Ok(s) if s.success()) {
            log::warn!("git init failed in {}", dir.display());
        }
    }
    Ok(SKELETON.iter().map(|s| (*s).to_owned()).collect())
}
