//! The `kerblam.toml` project manifest.
//!
//! The manifest marks a directory as a managed project and configures where
//! data and code live, which inputs can be downloaded, the input profiles and
//! container execution preferences. Every section is optional:
//!
//! ```toml
//! [meta]
//! version = 1
//!
//! [data]
//! dir = "data"
//! input = "data/in"
//! output = "data/out"
//!
//! [data.remote]
//! "input.csv" = "https://example.org/input.csv"
//! "big.bin" = { url = "https://example.org/big.bin", sha256 = "..." }
//!
//! [data.profiles.test]
//! "input.csv" = "test_input.csv"
//!
//! [code]
//! workflows = "src/workflows"
//! dockerfiles = "src/dockerfiles"
//!
//! [execution]
//! engines = ["docker", "podman"]
//! default_workflow = "process"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relpath::RelPath;

pub const MANIFEST_FILE: &str = "kerblam.toml";
pub const MANIFEST_VERSION: i64 = 1;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("no {MANIFEST_FILE} found in {} or any parent directory", start.display())]
    NotAProject { start: PathBuf },
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed manifest at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid manifest value at `{key}`: {message}")]
    Validation { key: String, message: String },
}

impl ManifestError {
    fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteFile {
    pub url: String,
    /// Lowercase hex digest, when declared.
    pub sha256: Option<String>,
}

/// Original input-relative path → replacement input-relative path.
pub type Profile = BTreeMap<RelPath, RelPath>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionOptions {
    pub engines: Vec<String>,
    pub default_workflow: Option<String>,
}

impl Default for ExecutionOptions {
    fn default() -> Self {
        Self {
            engines: vec!["docker".to_owned(), "podman".to_owned()],
            default_workflow: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectManifest {
    /// Directory containing the manifest file.
    pub root: PathBuf,
    pub data_dir: RelPath,
    pub input_dir: RelPath,
    pub output_dir: RelPath,
    pub workflows_dir: RelPath,
    pub recipes_dir: RelPath,
    /// Keyed by input-relative path.
    pub remote_files: BTreeMap<RelPath, RemoteFile>,
    pub profiles: BTreeMap<String, Profile>,
    pub execution: ExecutionOptions,
}

fn default_path(raw: &str) -> RelPath {
    RelPath::parse(raw).expect("default paths are valid")
}

impl ProjectManifest {
    /// A manifest with every default filled in.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            data_dir: default_path("data"),
            input_dir: default_path("data/in"),
            output_dir: default_path("data/out"),
            workflows_dir: default_path("src/workflows"),
            recipes_dir: default_path("src/dockerfiles"),
            remote_files: BTreeMap::new(),
            profiles: BTreeMap::new(),
            execution: ExecutionOptions::default(),
        }
    }

    /// Reads and parses `<root>/kerblam.toml`.
    pub fn load(root: &Path) -> Result<Self, ManifestError> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|source| ManifestError::Io {
            path: path.clone(),
            source,
        })?;
        let root = fs::canonicalize(root).map_err(|source| ManifestError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        parse_manifest(&text, root)
    }

    /// Locates the nearest project above `start` and loads its manifest.
    pub fn discover(start: &Path) -> Result<Self, ManifestError> {
        let root = find_project(start)?;
        Self::load(&root)
    }

    pub fn path(&self, rel: &RelPath) -> PathBuf {
        rel.to_path(&self.root)
    }

    pub fn input_path(&self, input_relative: &RelPath) -> PathBuf {
        self.path(&self.input_dir.join(input_relative))
    }

    /// Name of the project directory, used for image naming.
    pub fn project_name(&self) -> String {
        self.root
            .file_name()
            .map(|name| name.to_string_lossy().into_owned())
            .unwrap_or_else(|| "project".to_owned())
    }

    /// Serializes the manifest (everything except `root`) to TOML.
    pub fn to_toml(&self) -> String {
        let raw = RawManifest {
            meta: Some(RawMeta {
                version: Some(MANIFEST_VERSION),
            }),
            data: Some(RawData {
                dir: Some(self.data_dir.to_string()),
                input: Some(self.input_dir.to_string()),
                output: Some(self.output_dir.to_string()),
                remote: Some(
                    self.remote_files
                        .iter()
                        .map(|(path, remote)| {
                            let value = match &remote.sha256 {
                                None => RawRemote::Url(remote.url.clone()),
                                Some(sha) => RawRemote::Table(RawRemoteTable {
                                    url: remote.url.clone(),
                                    sha256: Some(sha.clone()),
                                }),
                            };
                            (path.to_string(), value)
                        })
                        .collect(),
                ),
                profiles: Some(
                    self.profiles
                        .iter()
                        .map(|(name, swaps)| {
                            let swaps = swaps
                                .iter()
                                .map(|(from, to)| (from.to_string(), to.to_string()))
                                .collect();
                            (name.clone(), swaps)
                        })
                        .collect(),
                ),
            }),
            code: Some(RawCode {
                workflows: Some(self.workflows_dir.to_string()),
                dockerfiles: Some(self.recipes_dir.to_string()),
            }),
            execution: Some(RawExecution {
                engines: Some(self.execution.engines.clone()),
                default_workflow: self.execution.default_workflow.clone(),
            }),
        };
        toml::to_string(&raw).expect("manifest serialization cannot fail")
    }

    /// Checks every structural invariant. `parse_manifest` calls this; it is
    /// public for manifests assembled in code.
    pub fn validate(&self) -> Result<(), ManifestError> {
        for (key, dir) in [("data.input", &self.input_dir), ("data.output", &self.output_dir)] {
            if !dir.is_inside(&self.data_dir) {
                return Err(ManifestError::invalid(
                    key,
                    format!("`{dir}` must be inside the data directory `{}`", self.data_dir),
                ));
            }
        }
        if self.input_dir.starts_with(&self.output_dir) || self.output_dir.starts_with(&self.input_dir)
        {
            return Err(ManifestError::invalid(
                "data.output",
                format!(
                    "input `{}` and output `{}` directories must not overlap",
                    self.input_dir, self.output_dir
                ),
            ));
        }
        for (key, dir) in [
            ("code.workflows", &self.workflows_dir),
            ("code.dockerfiles", &self.recipes_dir),
        ] {
            if dir.starts_with(&self.data_dir) || self.data_dir.starts_with(dir) {
                return Err(ManifestError::invalid(
                    key,
                    format!("`{dir}` must not overlap the data directory `{}`", self.data_dir),
                ));
            }
        }
        for (path, remote) in &self.remote_files {
            let key = format!("data.remote.{}", quote_key(path.as_str()));
            if !(remote.url.starts_with("http://") || remote.url.starts_with("https://")) {
                return Err(ManifestError::invalid(
                    key,
                    format!("`{}` is not an http(s) URL", remote.url),
                ));
            }
            if let Some(sha) = &remote.sha256 {
                if !is_sha256_hex(sha) {
                    return Err(ManifestError::invalid(
                        format!("{key}.sha256"),
                        "expected 64 lowercase hexadecimal characters",
                    ));
                }
            }
        }
        for (name, swaps) in &self.profiles {
            if name.is_empty() {
                return Err(ManifestError::invalid("data.profiles", "profile names must not be empty"));
            }
            let mut seen = BTreeSet::new();
            for (original, replacement) in swaps {
                let key = format!("data.profiles.{}.{}", quote_key(name), quote_key(original.as_str()));
                if original == replacement {
                    return Err(ManifestError::invalid(key, "a file cannot replace itself"));
                }
                if !seen.insert(replacement) {
                    return Err(ManifestError::invalid(
                        key,
                        format!("replacement `{replacement}` is used by more than one original"),
                    ));
                }
            }
        }
        if self.execution.engines.iter().any(|engine| engine.trim().is_empty()) {
            return Err(ManifestError::invalid("execution.engines", "engine names must not be empty"));
        }
        if matches!(&self.execution.default_workflow, Some(name) if name.is_empty()) {
            return Err(ManifestError::invalid(
                "execution.default_workflow",
                "workflow name must not be empty",
            ));
        }
        Ok(())
    }
}

/// Walks from `start` up to the filesystem root looking for a manifest.
pub fn find_project(start: &Path) -> Result<PathBuf, ManifestError> {
    let start = fs::canonicalize(start).map_err(|source| ManifestError::Io {
        path: start.to_path_buf(),
        source,
    })?;
    start
        .ancestors()
        .find(|dir| dir.join(MANIFEST_FILE).is_file())
        .map(Path::to_path_buf)
        .ok_or(ManifestError::NotAProject { start })
}

/// Parses a manifest document, filling defaults and validating invariants.
pub fn parse_manifest(text: &str, root: impl Into<PathBuf>) -> Result<ProjectManifest, ManifestError> {
    if let Err(err) = text.parse::<toml::Table>() {
        let (line, column) = location(text, err.span());
        return Err(ManifestError::Syntax {
            line,
            column,
            message: err.message().to_owned(),
        });
    }
    let raw: RawManifest = toml::from_str(text).map_err(|err| {
        let (line, column) = location(text, err.span());
        ManifestError::invalid(
            format!("line {line}, column {column}"),
            err.message().trim_end().to_owned(),
        )
    })?;

    let mut manifest = ProjectManifest::new(root);
    if let Some(meta) = raw.meta {
        if let Some(version) = meta.version {
            if version != MANIFEST_VERSION {
                return Err(ManifestError::invalid(
                    "meta.version",
                    format!("unsupported manifest version {version} (expected {MANIFEST_VERSION})"),
                ));
            }
        }
    }
    if let Some(data) = raw.data {
        if let Some(dir) = data.dir {
            manifest.data_dir = rel_value("data.dir", &dir)?;
        }
        if let Some(dir) = data.input {
            manifest.input_dir = rel_value("data.input", &dir)?;
        }
        if let Some(dir) = data.output {
            manifest.output_dir = rel_value("data.output", &dir)?;
        }
        for (raw_path, value) in data.remote.unwrap_or_default() {
            let key = format!("data.remote.{}", quote_key(&raw_path));
            let path = rel_value(&key, &raw_path)?;
            let remote = match value {
                RawRemote::Url(url) => RemoteFile { url, sha256: None },
                RawRemote::Table(table) => RemoteFile {
                    url: table.url,
                    sha256: table.sha256.map(|sha| sha.to_ascii_lowercase()),
                },
            };
            if manifest.remote_files.insert(path.clone(), remote).is_some() {
                return Err(ManifestError::invalid(
                    key,
                    format!("`{path}` is declared more than once"),
                ));
            }
        }
        for (name, swaps) in data.profiles.unwrap_or_default() {
            let mut profile = Profile::new();
            for (raw_original, raw_replacement) in swaps {
                let key = format!("data.profiles.{}.{}", quote_key(&name), quote_key(&raw_original));
                let original = rel_value(&key, &raw_original)?;
                let replacement = rel_value(&key, &raw_replacement)?;
                if profile.insert(original.clone(), replacement).is_some() {
                    return Err(ManifestError::invalid(
                        key,
                        format!("`{original}` is swapped more than once"),
                    ));
                }
            }
            manifest.profiles.insert(name, profile);
        }
    }
    if let Some(code) = raw.code {
        if let Some(dir) = code.workflows {
            manifest.workflows_dir = rel_value("code.workflows", &dir)?;
        }
        if let Some(dir) = code.dockerfiles {
            manifest.recipes_dir = rel_value("code.dockerfiles", &dir)?;
        }
    }
    if let Some(execution) = raw.execution {
        if let Some(engines) = execution.engines {
            manifest.execution.engines = engines;
        }
        manifest.execution.default_workflow = execution.default_workflow;
    }
    manifest.validate()?;
    Ok(manifest)
}

pub(crate) fn is_sha256_hex(value: &str) -> bool {
    value.len() == 64 && value.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn rel_value(key: &str, raw: &str) -> Result<RelPath, ManifestError> {
    RelPath::parse(raw).map_err(|err| ManifestError::invalid(key, err.to_string()))
}

fn quote_key(key: &str) -> String {
    if !key.is_empty() && key.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-') {
        key.to_owned()
    } else {
        format!("{key:?}")
    }
}

/// 1-based line and column of a byte span start.
fn location(text: &str, span: Option<std::ops::Range<usize>>) -> (usize, usize) {
    let offset = span.map_or(0, |span| span.start).min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |tail| tail.chars().count()) + 1;
    (line, column)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<RawMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<RawData>,
    #[serde(skip_serializing_if = "Option::is_none")]
    code: Option<RawCode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    execution: Option<RawExecution>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeta {
    version: Option<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    #[serde(skip_serializing_if = "Option::is_none")]
    dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    input: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    remote: Option<BTreeMap<String, RawRemote>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    profiles: Option<BTreeMap<String, BTreeMap<String, String>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawRemote {
    Url(String),
    Table(RawRemoteTable),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRemoteTable {
    url: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sha256: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCode {
    #[serde(skip_serializing_if = "Option::is_none")]
    workflows: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dockerfiles: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExecution {
    #[serde(skip_serializing_if = "Option::is_none")]
    engines: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    default_workflow: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rp(s: &str) -> RelPath {
        RelPath::parse(s).unwrap()
    }

    fn parse(text: &str) -> Result<ProjectManifest, ManifestError> {
        parse_manifest(text, "/proj")
    }

    #[test]
    fn empty_document_yields_defaults() {
        let manifest = parse("").unwrap();
        assert_eq!(manifest, ProjectManifest::new("/proj"));
        assert_eq!(manifest.data_dir.as_str(), "data");
        assert_eq!(manifest.input_dir.as_str(), "data/in");
        assert_eq!(manifest.output_dir.as_str(), "data/out");
        assert_eq!(manifest.workflows_dir.as_str(), "src/workflows");
        assert_eq!(manifest.recipes_dir.as_str(), "src/dockerfiles");
        assert!(manifest.remote_files.is_empty());
        assert!(manifest.profiles.is_empty());
    }

    #[test]
    fn remote_file_entry() {
        let manifest = parse("[data.remote]\n\"input.csv\" = \"https://example.org/input.csv\"\n").unwrap();
        assert_eq!(manifest.remote_files.len(), 1);
        assert_eq!(
            manifest.remote_files[&rp("input.csv")],
            RemoteFile {
                url: "https://example.org/input.csv".into(),
                sha256: None
            }
        );
    }

    #[test]
    fn remote_file_with_checksum() {
        let sha = "AB".repeat(32);
        let text = format!("[data.remote]\n\"x.bin\" = {{ url = \"http://h/x\", sha256 = \"{sha}\" }}\n");
        let manifest = parse(&text).unwrap();
        assert_eq!(
            manifest.remote_files[&rp("x.bin")].sha256.as_deref(),
            Some("ab".repeat(32).as_str())
        );
    }

    #[test]
    fn profile_entry() {
        let manifest = parse("[data.profiles.test]\n\"input.csv\" = \"test_input.csv\"\n").unwrap();
        let expected: Profile = [(rp("input.csv"), rp("test_input.csv"))].into_iter().collect();
        assert_eq!(manifest.profiles["test"], expected);
    }

    #[test]
    fn self_swap_is_rejected() {
        let err = parse("[data.profiles.p]\n\"a.csv\" = \"a.csv\"\n").unwrap_err();
        match err {
            ManifestError::Validation { key, .. } => assert_eq!(key, "data.profiles.p.\"a.csv\""),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn shared_replacement_is_rejected() {
        let err = parse("[data.profiles.p]\n\"a\" = \"c\"\n\"b\" = \"c\"\n").unwrap_err();
        assert!(matches!(err, ManifestError::Validation { .. }), "{err:?}");
    }

    #[test]
    fn parent_segments_are_rejected() {
        let err = parse("[data.remote]\n\"../escape\" = \"http://h/x\"\n").unwrap_err();
        assert!(matches!(err, ManifestError::Validation { ref key, .. } if key == "data.remote.\"../escape\""));
        assert!(parse("[data.profiles.p]\n\"a\" = \"../b\"\n").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = parse("[data]\ndir = \"data\"\ninptu = \"data/in\"\n").unwrap_err();
        match err {
            ManifestError::Validation { key, message } => {
                assert_eq!(key, "line 3, column 1");
                assert!(message.contains("inptu"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse("[bogus]\n").is_err());
    }

    #[test]
    fn syntax_errors_are_distinguished() {
        let err = parse("[data\n").unwrap_err();
        assert!(matches!(err, ManifestError::Syntax { line: 1, .. }), "{err:?}");
    }

    #[test]
    fn directory_layout_invariants() {
        assert!(parse("[data]\ninput = \"elsewhere/in\"\n").is_err());
        assert!(parse("[data]\ninput = \"data\"\n").is_err());
        assert!(parse("[data]\ninput = \"data/x\"\noutput = \"data/x/y\"\n").is_err());
        assert!(parse("[code]\nworkflows = \"data/wf\"\n").is_err());
        let custom = parse("[data]\ndir = \"d\"\ninput = \"d/i\"\noutput = \"d/o\"\n").unwrap();
        assert_eq!(custom.input_dir.as_str(), "d/i");
    }

    #[test]
    fn version_must_be_one() {
        assert!(parse("[meta]\nversion = 1\n").is_ok());
        assert!(parse("[meta]\nversion = 2\n").is_err());
    }

    #[test]
    fn find_project_walks_ancestors() {
        let tmp = tempfile::tempdir().unwrap();
        let root = fs::canonicalize(tmp.path()).unwrap();
        fs::write(root.join(MANIFEST_FILE), "").unwrap();
        fs::create_dir_all(root.join("src/workflows")).unwrap();
        assert_eq!(find_project(&root.join("src/workflows")).unwrap(), root);
        assert_eq!(find_project(&root).unwrap(), root);
    }

    #[test]
    fn find_project_fails_without_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        // Temp dirs normally have no manifest above them.
        if find_project(tmp.path()).is_ok() {
            return;
        }
        assert!(matches!(find_project(tmp.path()), Err(ManifestError::NotAProject { .. })));
    }

    fn segment() -> impl Strategy<Value = String> {
        "[a-z][a-z0-9_.]{0,6}".prop_filter("no dot-only names", |s| s != "." && s != "..")
    }

    fn rel() -> impl Strategy<Value = RelPath> {
        prop::collection::vec(segment(), 1..3).prop_map(|parts| RelPath::parse(&parts.join("/")).unwrap())
    }

    fn arb_manifest() -> impl Strategy<Value = ProjectManifest> {
        let remote = prop::collection::btree_map(
            rel(),
            (segment(), prop::option::of("[0-9a-f]{64}")).prop_map(|(host, sha256)| RemoteFile {
                url: format!("https://{host}/file"),
                sha256,
            }),
            0..4,
        );
        let profile = prop::collection::btree_map(rel(), rel(), 0..4).prop_filter_map(
            "valid swaps",
            |map| {
                let targets: BTreeSet<_> = map.values().collect();
                let valid = targets.len() == map.len() && map.iter().all(|(a, b)| a != b);
                valid.then_some(map)
            },
        );
        let profiles = prop::collection::btree_map("[a-z]{1,5}", profile, 0..3);
        let engines = prop::collection::vec("[a-z]{1,8}", 0..3);
        (remote, profiles, engines, prop::option::of("[a-z]{1,8}")).prop_map(
            |(remote_files, profiles, engines, default_workflow)| {
                let mut manifest = ProjectManifest::new("/proj");
                manifest.remote_files = remote_files;
                manifest.profiles = profiles;
                manifest.execution = ExecutionOptions {
                    engines,
                    default_workflow,
                };
                manifest
            },
        )
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(manifest in arb_manifest()) {
            let text = manifest.to_toml();
            let parsed = parse_manifest(&text, "/proj").unwrap();
            prop_assert_eq!(parsed, manifest);
        }

        #[test]
        fn arbitrary_documents_never_panic(text in "\\PC{0,200}") {
            if let Ok(manifest) = parse(&text) {
                prop_assert!(manifest.validate().is_ok());
            }
        }

        #[test]
        fn structured_documents_fully_validate(
            keys in prop::collection::vec(("[a-z./]{1,10}", "[a-z./]{0,10}"), 0..5),
        ) {
            let mut text = String::from("[data.profiles.p]\n");
            for (k, v) in &keys {
                text.push_str(&format!("{k:?} = {v:?}\n"));
            }
            match parse(&text) {
                Ok(manifest) => prop_assert!(manifest.validate().is_ok()),
                Err(ManifestError::Validation { .. }) | Err(ManifestError::Syntax { .. }) => {}
                Err(other) => prop_assert!(false, "unexpected error {:?}", other),
            }
        }
    }
}
