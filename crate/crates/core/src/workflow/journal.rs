//! Input profile swaps, persisted as a journal so they survive a crash.
//!
//! Applying a profile moves every original out of the way into a hidden
//! holding file next to it, then moves each replacement to its original's
//! name. All moves are plain renames executed in a fixed order derived from
//! the journal entries, and every completed move is appended to the journal
//! before the next one starts. Reverting undoes the moves in reverse order,
//! so a journal left behind by a killed process can always be replayed
//! backwards.
//!
//! Journal layout (`.kerblam/swap_journal`):
//!
//! ```text
//! kerblam-swap-journal<TAB>1
//! <original><TAB><replacement><TAB><holding>
//! ...
//! @done<TAB><step>
//! @undone<TAB><step>
//! ```
//!
//! Paths are project-relative.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::debug;

use super::WorkflowError;
use crate::manifest::ProjectManifest;
use crate::relpath::RelPath;

pub const JOURNAL_DIR: &str = ".kerblam";
pub const JOURNAL_FILE: &str = "swap_journal";
const HEADER: &str = "kerblam-swap-journal\t1";
const HOLDING_SUFFIX: &str = ".kerblam-held";

pub fn journal_path(root: &Path) -> PathBuf {
    root.join(JOURNAL_DIR).join(JOURNAL_FILE)
}

/// True when a swap journal exists under `root`.
pub fn is_applied(root: &Path) -> bool {
    journal_path(root).exists()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapEntry {
    pub original: RelPath,
    pub replacement: RelPath,
    pub holding: RelPath,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapState {
    Applied,
    Reverted,
}

#[derive(Debug, Clone)]
pub struct SwapJournal {
    pub root: PathBuf,
    pub path: PathBuf,
    pub profile: Option<String>,
    pub entries: Vec<SwapEntry>,
    pub state: SwapState,
}

/// One rename in the apply sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Step {
    from: RelPath,
    to: RelPath,
}

/// The full rename sequence: originals to holdings, then each replacement
/// (or, if the replacement is itself swapped, its holding) to the original.
fn steps(entries: &[SwapEntry]) -> Vec<Step> {
    let holding_of: BTreeMap<&RelPath, &RelPath> =
        entries.iter().map(|e| (&e.original, &e.holding)).collect();
    let mut steps: Vec<Step> = entries
        .iter()
        .map(|e| Step {
            from: e.original.clone(),
            to: e.holding.clone(),
        })
        .collect();
    steps.extend(entries.iter().map(|e| Step {
        from: holding_of
            .get(&e.replacement)
            .map_or_else(|| e.replacement.clone(), |h| (*h).clone()),
        to: e.original.clone(),
    }));
    steps
}

fn holding_for(original: &RelPath) -> RelPath {
    let name = format!(".{}{HOLDING_SUFFIX}", original.file_name());
    let name = RelPath::parse(&name).expect("holding names are valid");
    match original.parent() {
        Some(parent) => parent.join(&name),
        None => name,
    }
}

fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> WorkflowError {
    let path = path.into();
    move |source| WorkflowError::Io { path, source }
}

fn encode(entries: &[SwapEntry], profile: &str) -> String {
    let mut text = format!("{HEADER}\n@profile\t{profile}\n");
    for entry in entries {
        text.push_str(&format!("{}\t{}\t{}\n", entry.original, entry.replacement, entry.holding));
    }
    text
}

struct Parsed {
    profile: Option<String>,
    entries: Vec<SwapEntry>,
    done: usize,
    lowest_undone: Option<usize>,
}

fn parse(text: &str) -> Result<Parsed, String> {
    let mut lines = text.split_inclusive('\n');
    match lines.next() {
        Some(line) if line.trim_end_matches('\n') == HEADER => {}
        other => return Err(format!("unrecognised journal header {other:?}")),
    }
    let mut parsed = Parsed {
        profile: None,
        entries: Vec::new(),
        done: 0,
        lowest_undone: None,
    };
    for line in lines {
        let Some(line) = line.strip_suffix('\n') else {
            // A torn final line from an interrupted append; the step it would
            // have recorded is resolved from the filesystem instead.
            break;
        };
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            ["@profile", name] => parsed.profile = Some((*name).to_owned()),
            ["@done", step] => {
                let step: usize = step.parse().map_err(|_| format!("bad step in {line:?}"))?;
                parsed.done = parsed.done.max(step);
            }
            ["@undone", step] => {
                let step: usize = step.parse().map_err(|_| format!("bad step in {line:?}"))?;
                parsed.lowest_undone = Some(parsed.lowest_undone.map_or(step, |low| low.min(step)));
            }
            [original, replacement, holding] => {
                let rel = |raw: &str| RelPath::parse(raw).map_err(|err| err.to_string());
                parsed.entries.push(SwapEntry {
                    original: rel(original)?,
                    replacement: rel(replacement)?,
                    holding: rel(holding)?,
                });
            }
            _ => return Err(format!("unrecognised journal line {line:?}")),
        }
    }
    Ok(parsed)
}

fn append_marker(path: &Path, marker: &str, step: usize) -> Result<(), WorkflowError> {
    let mut file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    file.write_all(format!("{marker}\t{step}\n").as_bytes())
        .and_then(|_| file.sync_data())
        .map_err(io_err(path))
}

fn sync_dir(dir: &Path) {
    if let Ok(handle) = File::open(dir) {
        let _ = handle.sync_all();
    }
}

/// Writes the journal durably: temp file, fsync, rename, fsync directory.
fn write_journal(root: &Path, text: &str) -> Result<PathBuf, WorkflowError> {
    let dir = root.join(JOURNAL_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = dir.join(JOURNAL_FILE);
    let tmp = dir.join(format!("{JOURNAL_FILE}.tmp"));
    let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.sync_all())
        .map_err(io_err(&tmp))?;
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    sync_dir(&dir);
    Ok(path)
}

fn remove_journal(root: &Path) -> Result<(), WorkflowError> {
    let path = journal_path(root);
    fs::remove_file(&path).map_err(io_err(&path))?;
    // Only removes the directory if nothing else lives there.
    let _ = fs::remove_dir(root.join(JOURNAL_DIR));
    sync_dir(root);
    Ok(())
}

fn validate(manifest: &ProjectManifest, profile: &str) -> Result<Vec<SwapEntry>, WorkflowError> {
    let swaps = manifest
        .profiles
        .get(profile)
        .ok_or_else(|| WorkflowError::UnknownProfile(profile.to_owned()))?;
    if is_applied(&manifest.root) {
        return Err(WorkflowError::SwapAlreadyApplied);
    }
    let mut entries = Vec::with_capacity(swaps.len());
    for (original, replacement) in swaps {
        let original = manifest.input_dir.join(original);
        let replacement = manifest.input_dir.join(replacement);
        for path in [&original, &replacement] {
            match fs::symlink_metadata(manifest.path(path)) {
                Ok(meta) if meta.is_file() => {}
                Ok(_) => return Err(WorkflowError::ProfileNotAFile(path.clone())),
                Err(_) => return Err(WorkflowError::ProfileFileMissing(path.clone())),
            }
        }
        let holding = holding_for(&original);
        if fs::symlink_metadata(manifest.path(&holding)).is_ok() {
            return Err(WorkflowError::HoldingPathOccupied(holding));
        }
        entries.push(SwapEntry {
            original,
            replacement,
            holding,
        });
    }
    Ok(entries)
}

/// Swaps in the files of `profile`. The journal reaches the disk before the
/// first rename.
pub fn apply_profile(manifest: &ProjectManifest, profile: &str) -> Result<SwapJournal, WorkflowError> {
    apply(manifest, profile, None)
}

/// Applies `profile` but stops as if the process died: `completed` renames
/// are performed and logged, plus one more rename that is never logged when
/// `torn` is set. The journal is left on disk for [`recover`].
#[doc(hidden)]
pub fn simulate_interrupted_apply(
    manifest: &ProjectManifest,
    profile: &str,
    completed: usize,
    torn: bool,
) -> Result<(), WorkflowError> {
    apply(manifest, profile, Some((completed, torn))).map(drop)
}

fn apply(
    manifest: &ProjectManifest,
    profile: &str,
    interrupt: Option<(usize, bool)>,
) -> Result<SwapJournal, WorkflowError> {
    let entries = validate(manifest, profile)?;
    let root = &manifest.root;
    let path = write_journal(root, &encode(&entries, profile))?;
    let plan = steps(&entries);
    for (idx, step) in plan.iter().enumerate() {
        let number = idx + 1;
        if let Some((completed, torn)) = interrupt {
            if idx == completed {
                if torn {
                    fs::rename(step.from.to_path(root), step.to.to_path(root))
                        .map_err(io_err(step.from.to_path(root)))?;
                }
                return Ok(journal(manifest, profile, path, entries));
            }
        }
        if let Err(source) = fs::rename(step.from.to_path(root), step.to.to_path(root)) {
            let failure = WorkflowError::Io {
                path: step.from.to_path(root),
                source,
            };
            // Roll back what was done so far; the journal drives it.
            if let Err(rollback) = recover(root) {
                log::error!("rolling back a failed profile swap also failed: {rollback}");
            }
            return Err(failure);
        }
        debug!("swap step {number}: {} -> {}", step.from, step.to);
        append_marker(&path, "@done", number)?;
    }
    Ok(journal(manifest, profile, path, entries))
}

fn journal(manifest: &ProjectManifest, profile: &str, path: PathBuf, entries: Vec<SwapEntry>) -> SwapJournal {
    SwapJournal {
        root: manifest.root.clone(),
        path,
        profile: Some(profile.to_owned()),
        entries,
        state: SwapState::Applied,
    }
}

/// Restores every original; removes the journal on success.
pub fn revert_profile(journal: &mut SwapJournal) -> Result<(), WorkflowError> {
    if journal.state != SwapState::Applied {
        return Err(WorkflowError::JournalAbsent);
    }
    revert_from_disk(&journal.root)?;
    journal.state = SwapState::Reverted;
    Ok(())
}

/// Loads the journal under `root`, if any.
pub fn load(root: &Path) -> Result<Option<SwapJournal>, WorkflowError> {
    let path = journal_path(root);
    let text = match fs::read_to_string(&path) {
        Ok(text) => text,
        Err(err) if err.kind() == io::ErrorKind::NotFound => return Ok(None),
        Err(err) => return Err(io_err(&path)(err)),
    };
    let parsed = parse(&text).map_err(|msg| WorkflowError::JournalCorrupt(vec![msg]))?;
    Ok(Some(SwapJournal {
        root: root.to_path_buf(),
        path,
        profile: parsed.profile,
        entries: parsed.entries,
        state: SwapState::Applied,
    }))
}

/// Reverts a journal left behind by an interrupted run. Returns the journal
/// that was reverted, or `None` when nothing was applied.
pub fn recover(root: &Path) -> Result<Option<SwapJournal>, WorkflowError> {
    let Some(mut journal) = load(root)? else {
        return Ok(None);
    };
    revert_from_disk(root)?;
    journal.state = SwapState::Reverted;
    Ok(Some(journal))
}

fn exists(root: &Path, rel: &RelPath) -> bool {
    fs::symlink_metadata(rel.to_path(root)).is_ok()
}

fn revert_from_disk(root: &Path) -> Result<(), WorkflowError> {
    let path = journal_path(root);
    let text = match fs::read_to_string(&path) {
        Ok(text) => text,
        Err(err) if err.kind() == io::ErrorKind::NotFound => return Err(WorkflowError::JournalAbsent),
        Err(err) => return Err(io_err(&path)(err)),
    };
    let parsed = parse(&text).map_err(|msg| WorkflowError::JournalCorrupt(vec![msg]))?;
    let plan = steps(&parsed.entries);

    // Highest step that may have happened. A step after the last logged one
    // may have completed without being logged; its rename is atomic, so the
    // filesystem tells which side of it we are on.
    let mut top = match parsed.lowest_undone {
        Some(low) => low - 1,
        None => {
            let mut top = parsed.done.min(plan.len());
            if let Some(step) = plan.get(top) {
                if !exists(root, &step.from) && exists(root, &step.to) {
                    top += 1;
                }
            }
            top
        }
    };
    // Likewise the next undo may have happened without being logged.
    if top >= 1 {
        let step = &plan[top - 1];
        if exists(root, &step.from) && !exists(root, &step.to) {
            top -= 1;
        }
    }

    let mut failures = Vec::new();
    while top >= 1 {
        let step = &plan[top - 1];
        let from = step.from.to_path(root);
        let to = step.to.to_path(root);
        if exists(root, &step.from) || !exists(root, &step.to) {
            failures.push(format!(
                "cannot undo move of `{}` to `{}`: unexpected files on disk",
                step.from, step.to
            ));
        } else if let Err(err) = fs::rename(&to, &from) {
            failures.push(format!("cannot move `{}` back to `{}`: {err}", step.to, step.from));
        } else {
            debug!("undo step {top}: {} -> {}", step.to, step.from);
            append_marker(&path, "@undone", top)?;
        }
        top -= 1;
    }
    if !failures.is_empty() {
        return Err(WorkflowError::JournalCorrupt(failures));
    }
    remove_journal(root)
}
