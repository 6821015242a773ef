//! Data classification and lifecycle commands.
//!
//! Files under the data directory are classified by location: the input
//! directory holds inputs, the output directory holds outputs, anything else
//! under the data directory is intermediate. Inputs declared in the manifest's
//! remote map can be downloaded again, so they are fragile like intermediates
//! and outputs. Local-only inputs are precious and are never deleted.

mod fetch;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;
use walkdir::WalkDir;

use crate::archive::{self, ArchiveEntry};
use crate::manifest::ProjectManifest;
use crate::relpath::RelPath;
use crate::workflow::journal;

pub use fetch::{
    fetch, FetchFileError, FetchOptions, FetchOutcome, FetchReport, FetchStatus, HttpTransport,
    Transport, TransportError, DEFAULT_FETCH_JOBS,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("`{0}` is not inside the data directory")]
    OutsideDataDir(RelPath),
    #[error("nothing to pack: no {0} files found")]
    NothingToPack(PackSelection),
    #[error("an input profile is currently applied; revert it (or rerun the workflow) first")]
    SwapInProgress,
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Input,
    Intermediate,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Locality {
    Remote,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fragility {
    Precious,
    Fragile,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Input => "input",
            Role::Intermediate => "intermediate",
            Role::Output => "output",
        })
    }
}

impl fmt::Display for Fragility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fragility::Precious => "precious",
            Fragility::Fragile => "fragile",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Classification {
    pub role: Role,
    pub locality: Locality,
    pub fragility: Fragility,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataFileRecord {
    pub path: RelPath,
    pub role: Role,
    pub locality: Locality,
    pub fragility: Fragility,
    pub size: u64,
    pub symlink: bool,
}

impl DataFileRecord {
    pub fn classification(&self) -> Classification {
        Classification {
            role: self.role,
            locality: self.locality,
            fragility: self.fragility,
        }
    }
}

/// Classifies a project-relative path without touching the filesystem.
pub fn classify_path(path: &RelPath, manifest: &ProjectManifest) -> Result<Classification, DataError> {
    if !path.is_inside(&manifest.data_dir) {
        return Err(DataError::OutsideDataDir(path.clone()));
    }
    let classification = if let Some(rel) = path.strip_prefix(&manifest.input_dir) {
        if manifest.remote_files.contains_key(&rel) {
            Classification {
                role: Role::Input,
                locality: Locality::Remote,
                fragility: Fragility::Fragile,
            }
        } else {
            Classification {
                role: Role::Input,
                locality: Locality::Local,
                fragility: Fragility::Precious,
            }
        }
    } else {
        let role = if path.is_inside(&manifest.output_dir) {
            Role::Output
        } else {
            Role::Intermediate
        };
        Classification {
            role,
            locality: Locality::Local,
            fragility: Fragility::Fragile,
        }
    };
    Ok(classification)
}

/// Classifies an existing file, reading its size. Symlinks are not followed.
pub fn classify(path: &RelPath, manifest: &ProjectManifest) -> Result<DataFileRecord, DataError> {
    let class = classify_path(path, manifest)?;
    let abs = manifest.path(path);
    let meta = fs::symlink_metadata(&abs).map_err(|err| DataError::io(&abs, err))?;
    let symlink = meta.file_type().is_symlink();
    Ok(DataFileRecord {
        path: path.clone(),
        role: class.role,
        locality: class.locality,
        fragility: class.fragility,
        size: if symlink { 0 } else { meta.len() },
        symlink,
    })
}

/// A problem with one entry that did not stop the surrounding operation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntryIssue {
    pub path: String,
    pub message: String,
}

/// Everything found under the data directory.
#[derive(Debug, Default, Clone)]
pub struct DataScan {
    /// Regular files and symlinks, sorted by path.
    pub files: Vec<DataFileRecord>,
    /// Directories strictly below the data directory.
    pub dirs: Vec<RelPath>,
    pub issues: Vec<EntryIssue>,
}

pub fn scan(manifest: &ProjectManifest) -> DataScan {
    let mut out = DataScan::default();
    let data_root = manifest.path(&manifest.data_dir);
    if fs::symlink_metadata(&data_root).is_err() {
        return out;
    }
    for entry in WalkDir::new(&data_root)
        .follow_links(false)
        .min_depth(1)
        .sort_by_file_name()
    {
        let entry = match entry {
            Ok(entry) => entry,
            Err(err) => {
                out.issues.push(EntryIssue {
                    path: err
                        .path()
                        .map(|p| p.display().to_string())
                        .unwrap_or_else(|| data_root.display().to_string()),
                    message: err.to_string(),
                });
                continue;
            }
        };
        let rel = match entry
            .path()
            .strip_prefix(&manifest.root)
            .map_err(|err| err.to_string())
            .and_then(|p| RelPath::from_path(p).map_err(|err| err.to_string()))
        {
            Ok(rel) => rel,
            Err(message) => {
                out.issues.push(EntryIssue {
                    path: entry.path().display().to_string(),
                    message,
                });
                continue;
            }
        };
        let file_type = entry.file_type();
        if file_type.is_dir() {
            out.dirs.push(rel);
            continue;
        }
        let size = if file_type.is_symlink() {
            0
        } else if file_type.is_file() {
            match entry.metadata() {
                Ok(meta) => meta.len(),
                Err(err) => {
                    out.issues.push(EntryIssue {
                        path: rel.to_string(),
                        message: err.to_string(),
                    });
                    continue;
                }
            }
        } else {
            // sockets, fifos and devices are not data
            continue;
        };
        let class = classify_path(&rel, manifest).expect("walked entries are inside the data dir");
        out.files.push(DataFileRecord {
            path: rel,
            role: class.role,
            locality: class.locality,
            fragility: class.fragility,
            size,
            symlink: file_type.is_symlink(),
        });
    }
    out.files.sort_by(|a, b| a.path.cmp(&b.path));
    out.dirs.sort();
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub files: u64,
    pub bytes: u64,
}

impl Tally {
    fn add(&mut self, bytes: u64) {
        self.files += 1;
        self.bytes += bytes;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Bucket {
    pub role: Role,
    pub fragility: Fragility,
    #[serde(flatten)]
    pub tally: Tally,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DataStats {
    /// One bucket per possible (role, fragility) pair, in a fixed order.
    pub buckets: Vec<Bucket>,
    pub total: Tally,
    /// Remote inputs declared in the manifest but absent on disk.
    pub declared_missing: Vec<RelPath>,
    pub issues: Vec<EntryIssue>,
}

impl DataStats {
    pub fn bucket(&self, role: Role, fragility: Fragility) -> Tally {
        self.buckets
            .iter()
            .find(|b| b.role == role && b.fragility == fragility)
            .map(|b| b.tally)
            .unwrap_or_default()
    }
}

pub const BUCKETS: [(Role, Fragility); 4] = [
    (Role::Input, Fragility::Precious),
    (Role::Input, Fragility::Fragile),
    (Role::Intermediate, Fragility::Fragile),
    (Role::Output, Fragility::Fragile),
];

pub fn stats(manifest: &ProjectManifest) -> DataStats {
    let scan = scan(manifest);
    let mut tallies: BTreeMap<(Role, Fragility), Tally> = BTreeMap::new();
    let mut total = Tally::default();
    let mut present = BTreeSet::new();
    for record in &scan.files {
        tallies
            .entry((record.role, record.fragility))
            .or_default()
            .add(record.size);
        total.add(record.size);
        if let Some(rel) = record.path.strip_prefix(&manifest.input_dir) {
            present.insert(rel);
        }
    }
    let declared_missing = manifest
        .remote_files
        .keys()
        .filter(|path| !present.contains(*path))
        .cloned()
        .collect();
    DataStats {
        buckets: BUCKETS
            .iter()
            .map(|&(role, fragility)| Bucket {
                role,
                fragility,
                tally: tallies.get(&(role, fragility)).copied().unwrap_or_default(),
            })
            .collect(),
        total,
        declared_missing,
        issues: scan.issues,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CleanOptions {
    /// Keep downloaded remote inputs.
    pub keep_remote: bool,
    pub dry_run: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CleanReport {
    pub dry_run: bool,
    /// Files deleted (or that would be deleted), sorted.
    pub deleted: Vec<RelPath>,
    /// Directories removed because deletion left them empty.
    pub removed_dirs: Vec<RelPath>,
    pub bytes: u64,
    pub issues: Vec<EntryIssue>,
}

/// What a clean would remove, computed without modifying anything.
pub fn clean_plan(manifest: &ProjectManifest, keep_remote: bool) -> Result<CleanReport, DataError> {
    if journal::is_applied(&manifest.root) {
        return Err(DataError::SwapInProgress);
    }
    let scan = scan(manifest);
    let doomed: Vec<&DataFileRecord> = scan
        .files
        .iter()
        .filter(|record| should_delete(record, keep_remote))
        .collect();
    let doomed_set: BTreeSet<&RelPath> = doomed.iter().map(|r| &r.path).collect();

    let protected = [&manifest.data_dir, &manifest.input_dir, &manifest.output_dir];
    let mut children: BTreeMap<&RelPath, Vec<(&RelPath, bool)>> = BTreeMap::new();
    for record in &scan.files {
        if let Some(parent) = parent_dir(&record.path, &scan.dirs) {
            children.entry(parent).or_default().push((&record.path, false));
        }
    }
    for dir in &scan.dirs {
        if let Some(parent) = parent_dir(dir, &scan.dirs) {
            children.entry(parent).or_default().push((dir, true));
        }
    }
    // A directory is removed when deletion empties it: it contains something
    // and every child is either a deleted file or another removed directory.
    // Deepest directories are decided first.
    let mut removable: BTreeSet<&RelPath> = BTreeSet::new();
    let mut by_depth: Vec<&RelPath> = scan.dirs.iter().collect();
    by_depth.sort_by_key(|dir| std::cmp::Reverse(dir.components().count()));
    let issue_paths: BTreeSet<&str> = scan.issues.iter().map(|i| i.path.as_str()).collect();
    for dir in by_depth {
        if protected.contains(&dir) {
            continue;
        }
        let Some(kids) = children.get(dir) else {
            continue;
        };
        let abs = manifest.path(dir).display().to_string();
        if issue_paths.iter().any(|p| p.starts_with(&abs)) {
            continue;
        }
        let emptied = kids.iter().all(|(path, is_dir)| {
            if *is_dir {
                removable.contains(path)
            } else {
                doomed_set.contains(path)
            }
        });
        if emptied {
            removable.insert(dir);
        }
    }
    let mut removed_dirs: Vec<RelPath> = removable.into_iter().cloned().collect();
    removed_dirs.sort_by(|a, b| {
        b.components()
            .count()
            .cmp(&a.components().count())
            .then_with(|| a.cmp(b))
    });
    Ok(CleanReport {
        dry_run: true,
        deleted: doomed.iter().map(|r| r.path.clone()).collect(),
        removed_dirs,
        bytes: doomed.iter().map(|r| r.size).sum(),
        issues: scan.issues,
    })
}

fn parent_dir<'a>(path: &RelPath, dirs: &'a [RelPath]) -> Option<&'a RelPath> {
    let parent = path.parent()?;
    dirs.binary_search(&parent).ok().map(|idx| &dirs[idx])
}

fn should_delete(record: &DataFileRecord, keep_remote: bool) -> bool {
    if record.symlink || record.fragility == Fragility::Precious {
        return false;
    }
    !(keep_remote && record.role == Role::Input && record.locality == Locality::Remote)
}

/// Deletes fragile data. Precious files and symlinks are never touched.
pub fn clean(manifest: &ProjectManifest, options: CleanOptions) -> Result<CleanReport, DataError> {
    let mut plan = clean_plan(manifest, options.keep_remote)?;
    plan.dry_run = options.dry_run;
    if options.dry_run {
        return Ok(plan);
    }
    let mut issues = std::mem::take(&mut plan.issues);
    let mut deleted = Vec::with_capacity(plan.deleted.len());
    for path in &plan.deleted {
        // Re-check right before deleting; the plan must never cover precious data.
        let class = classify_path(path, manifest)?;
        debug_assert_eq!(class.fragility, Fragility::Fragile);
        if class.fragility == Fragility::Precious {
            continue;
        }
        match fs::remove_file(manifest.path(path)) {
            Ok(()) => deleted.push(path.clone()),
            Err(err) => issues.push(EntryIssue {
                path: path.to_string(),
                message: err.to_string(),
            }),
        }
    }
    let mut removed_dirs = Vec::new();
    for dir in &plan.removed_dirs {
        match fs::remove_dir(manifest.path(dir)) {
            Ok(()) => removed_dirs.push(dir.clone()),
            Err(err) => issues.push(EntryIssue {
                path: dir.to_string(),
                message: err.to_string(),
            }),
        }
    }
    Ok(CleanReport {
        dry_run: false,
        deleted,
        removed_dirs,
        bytes: plan.bytes,
        issues,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PackSelection {
    Precious,
    Output,
}

impl fmt::Display for PackSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PackSelection::Precious => "precious",
            PackSelection::Output => "output",
        })
    }
}

/// Regular files matching `selection`, sorted by project-relative path.
pub fn select(manifest: &ProjectManifest, selection: PackSelection) -> Vec<DataFileRecord> {
    scan(manifest)
        .files
        .into_iter()
        .filter(|record| !record.symlink)
        .filter(|record| match selection {
            PackSelection::Precious => record.fragility == Fragility::Precious,
            PackSelection::Output => record.role == Role::Output,
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PackReport {
    pub archive: PathBuf,
    pub selection: PackSelection,
    pub entries: Vec<RelPath>,
    pub bytes: u64,
}

/// Writes the selected files to a deterministic `.tar.gz` at `dest`.
pub fn pack(manifest: &ProjectManifest, selection: PackSelection, dest: &Path) -> Result<PackReport, DataError> {
    let records = select(manifest, selection);
    if records.is_empty() {
        return Err(DataError::NothingToPack(selection));
    }
    let entries: Vec<ArchiveEntry> = records
        .iter()
        .map(|record| ArchiveEntry::file(record.path.to_string(), manifest.path(&record.path)))
        .collect();
    archive::write_tar_gz(dest, &entries).map_err(|err| DataError::io(dest, err))?;
    Ok(PackReport {
        archive: dest.to_path_buf(),
        selection,
        entries: records.iter().map(|r| r.path.clone()).collect(),
        bytes: records.iter().map(|r| r.size).sum(),
    })
}
