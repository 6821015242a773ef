//! Template-structure census: list many project trees, strip housekeeping
//! entries, merge the listings into a frequency tree and threshold it.
//!
//! Files and directories with the same path are distinct nodes, and path
//! comparison is case-sensitive.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use globset::{GlobBuilder, GlobSet, GlobSetBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use walkdir::WalkDir;

use crate::relpath::RelPath;

pub const DEFAULT_MIN_COUNT: usize = 3;
pub const DEFAULT_EXCLUSIONS: [&str; 3] = [".git", ".git/**", "**/.gitkeep"];

#[derive(Debug, Error)]
pub enum CensusError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("template `{0}` appears more than once")]
    DuplicateTemplateId(String),
    #[error("no templates to merge")]
    EmptyCorpus,
    #[error("{}:{line}: {message}", path.display())]
    ListingSyntax { path: PathBuf, line: usize, message: String },
    #[error("template `{template}` lists `{path}` both as a file and as a directory")]
    ConflictingKind { template: String, path: RelPath },
    #[error("invalid exclusion pattern `{pattern}`: {message}")]
    InvalidPattern { pattern: String, message: String },
    #[error("invalid census document: {0}")]
    InvalidDocument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    File,
    Dir,
}

impl EntryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::File => "file",
            EntryKind::Dir => "dir",
        }
    }
}

impl fmt::Display for EntryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The entries of one template. Ancestors of every entry are present as
/// directories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateListing {
    pub id: String,
    entries: BTreeMap<RelPath, EntryKind>,
}

impl TemplateListing {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            entries: BTreeMap::new(),
        }
    }

    /// Adds `path` and any missing ancestor directories.
    pub fn insert(&mut self, path: RelPath, kind: EntryKind) -> Result<(), CensusError> {
        let mut ancestor = path.parent();
        while let Some(dir) = ancestor {
            ancestor = dir.parent();
            self.insert_one(dir, EntryKind::Dir)?;
        }
        self.insert_one(path, kind)
    }

    fn insert_one(&mut self, path: RelPath, kind: EntryKind) -> Result<(), CensusError> {
        match self.entries.get(&path) {
            Some(existing) if *existing != kind => Err(CensusError::ConflictingKind {
                template: self.id.clone(),
                path,
            }),
            Some(_) => Ok(()),
            None => {
                self.entries.insert(path, kind);
                Ok(())
            }
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&RelPath, EntryKind)> {
        self.entries.iter().map(|(p, k)| (p, *k))
    }

    pub fn kind_of(&self, path: &RelPath) -> Option<EntryKind> {
        self.entries.get(path).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Renders the listing-file form accepted by [`parse_listing`].
    pub fn to_listing_text(&self) -> String {
        let mut out = String::new();
        for (path, kind) in self.entries() {
            let tag = match kind {
                EntryKind::File => 'F',
                EntryKind::Dir => 'D',
            };
            out.push(tag);
            out.push('\t');
            out.push_str(path.as_str());
            out.push('\n');
        }
        out
    }
}

/// Lists every entry under `root`. Symlinks are recorded as files and never
/// followed.
pub fn scan_tree(root: &Path) -> Result<TemplateListing, CensusError> {
    scan_tree_as(root, root.display().to_string())
}

fn scan_tree_as(root: &Path, id: String) -> Result<TemplateListing, CensusError> {
    let mut listing = TemplateListing::new(id);
    for entry in WalkDir::new(root).min_depth(1).follow_links(false).sort_by_file_name() {
        let entry = entry.map_err(|err| {
            let path = err.path().unwrap_or(root).to_path_buf();
            CensusError::Io {
                path,
                source: err.into(),
            }
        })?;
        let rel = entry.path().strip_prefix(root).expect("walk stays under root");
        let rel = RelPath::from_path(rel).map_err(|err| CensusError::Io {
            path: entry.path().to_path_buf(),
            source: io::Error::new(io::ErrorKind::InvalidData, err),
        })?;
        let kind = if entry.file_type().is_dir() {
            EntryKind::Dir
        } else {
            EntryKind::File
        };
        listing.insert(rel, kind)?;
    }
    Ok(listing)
}

/// Parses `F<TAB>path` / `D<TAB>path` lines; blank lines and lines starting
/// with `#` are ignored. `origin` is only used in error messages.
pub fn parse_listing(id: impl Into<String>, text: &str, origin: &Path) -> Result<TemplateListing, CensusError> {
    let mut listing = TemplateListing::new(id);
    for (index, line) in text.lines().enumerate() {
        let syntax = |message: String| CensusError::ListingSyntax {
            path: origin.to_path_buf(),
            line: index + 1,
            message,
        };
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (tag, path) = line
            .split_once('\t')
            .ok_or_else(|| syntax("expected `F<TAB>path` or `D<TAB>path`".into()))?;
        let kind = match tag {
            "F" => EntryKind::File,
            "D" => EntryKind::Dir,
            other => return Err(syntax(format!("unknown entry tag `{other}`"))),
        };
        let path = RelPath::parse(path).map_err(|err| syntax(err.to_string()))?;
        listing.insert(path, kind)?;
    }
    Ok(listing)
}

/// Reads one census input: a directory is scanned, anything else is parsed
/// as a listing file. The template id is `path` as given.
pub fn load_input(path: &Path) -> Result<TemplateListing, CensusError> {
    let id = path.display().to_string();
    let meta = fs::metadata(path).map_err(|source| CensusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if meta.is_dir() {
        scan_tree_as(path, id)
    } else {
        let text = fs::read_to_string(path).map_err(|source| CensusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        parse_listing(id, &text, path)
    }
}

/// Loads every input, scanning them concurrently.
pub fn load_inputs(paths: &[PathBuf]) -> Result<Vec<TemplateListing>, CensusError> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = paths
            .iter()
            .map(|path| scope.spawn(move || load_input(path)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("census scan thread panicked"))
            .collect()
    })
}

/// Glob patterns over listing paths. `*` does not cross `/`; `**` does.
#[derive(Debug, Clone)]
pub struct Exclusions {
    patterns: Vec<String>,
    set: GlobSet,
}

impl Exclusions {
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, CensusError> {
        let mut builder = GlobSetBuilder::new();
        for pattern in patterns {
            let pattern = pattern.as_ref();
            let glob = GlobBuilder::new(pattern)
                .literal_separator(true)
                .build()
                .map_err(|err| CensusError::InvalidPattern {
                    pattern: pattern.to_owned(),
                    message: err.kind().to_string(),
                })?;
            builder.add(glob);
        }
        let set = builder.build().map_err(|err| CensusError::InvalidPattern {
            pattern: patterns.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(", "),
            message: err.to_string(),
        })?;
        Ok(Self {
            patterns: patterns.iter().map(|p| p.as_ref().to_owned()).collect(),
            set,
        })
    }

    pub fn housekeeping() -> Self {
        Self::new(&DEFAULT_EXCLUSIONS).expect("default patterns are valid")
    }

    pub fn none() -> Self {
        Self::new::<&str>(&[]).expect("empty pattern set is valid")
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn matches(&self, path: &RelPath) -> bool {
        self.set.is_match(path.as_str())
    }
}

/// Drops every entry matching an exclusion, together with the contents of
/// any excluded directory.
pub fn strip_housekeeping(listing: &TemplateListing, exclusions: &Exclusions) -> TemplateListing {
    let mut kept = TemplateListing::new(listing.id.clone());
    let mut dropped_dirs: Vec<&RelPath> = Vec::new();
    // BTreeMap order visits a directory before anything inside it.
    for (path, kind) in listing.entries() {
        if dropped_dirs.iter().any(|dir| path.is_inside(dir)) {
            continue;
        }
        if exclusions.matches(path) {
            if kind == EntryKind::Dir {
                dropped_dirs.push(path);
            }
            continue;
        }
        kept.entries.insert(path.clone(), kind);
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyNode {
    pub name: String,
    pub kind: EntryKind,
    pub count: usize,
    #[serde(default)]
    pub children: Vec<FrequencyNode>,
}

impl FrequencyNode {
    fn sort(&mut self) {
        sort_nodes(&mut self.children);
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a FrequencyNode)>) {
        for child in &self.children {
            let path = if prefix.is_empty() {
                child.name.clone()
            } else {
                format!("{prefix}/{}", child.name)
            };
            out.push((path.clone(), child));
            child.visit(&path, out);
        }
    }
}

fn sort_nodes(nodes: &mut [FrequencyNode]) {
    nodes.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.name.cmp(&b.name))
            .then_with(|| a.kind.cmp(&b.kind))
    });
    for node in nodes {
        node.sort();
    }
}

/// Merged path tree over `templates` listings. The root stands for the
/// template root itself and always has `count == templates`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencyTree {
    pub templates: usize,
    pub root: FrequencyNode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UniquenessStats {
    pub entries: usize,
    pub unique_entries: usize,
    pub dirs: usize,
    pub unique_dirs: usize,
}

impl FrequencyTree {
    /// Every node with its slash-joined path, parents before children.
    pub fn nodes(&self) -> Vec<(String, &FrequencyNode)> {
        let mut out = Vec::new();
        self.root.visit("", &mut out);
        out
    }

    pub fn count(&self, path: &str, kind: EntryKind) -> usize {
        let mut node = &self.root;
        let parts: Vec<&str> = path.split('/').filter(|p| !p.is_empty()).collect();
        for (i, part) in parts.iter().enumerate() {
            let want = if i + 1 == parts.len() { kind } else { EntryKind::Dir };
            match node.children.iter().find(|c| c.name == *part && c.kind == want) {
                Some(child) => node = child,
                None => return 0,
            }
        }
        node.count
    }

    /// Entries present in exactly one template.
    pub fn uniqueness(&self) -> UniquenessStats {
        let mut stats = UniquenessStats {
            entries: 0,
            unique_entries: 0,
            dirs: 0,
            unique_dirs: 0,
        };
        for (_, node) in self.nodes() {
            let unique = node.count == 1;
            stats.entries += 1;
            stats.unique_entries += usize::from(unique);
            if node.kind == EntryKind::Dir {
                stats.dirs += 1;
                stats.unique_dirs += usize::from(unique);
            }
        }
        stats
    }

    /// Checks count bounds, monotonicity, child ordering and sibling
    /// uniqueness.
    pub fn validate(&self) -> Result<(), CensusError> {
        fn check(node: &FrequencyNode, templates: usize, path: &str) -> Result<(), CensusError> {
            let bad = |msg: String| Err(CensusError::InvalidDocument(msg));
            if node.count == 0 || node.count > templates {
                return bad(format!("`{path}` has count {} outside 1..={templates}", node.count));
            }
            if node.kind == EntryKind::File && !node.children.is_empty() {
                return bad(format!("file `{path}` has children"));
            }
            let mut sorted = node.children.clone();
            sort_nodes(&mut sorted);
            if sorted != node.children {
                return bad(format!("children of `{path}` are not in canonical order"));
            }
            for pair in node.children.windows(2) {
                if pair[0].name == pair[1].name && pair[0].kind == pair[1].kind {
                    return bad(format!("`{path}` lists `{}` twice", pair[0].name));
                }
            }
            for child in &node.children {
                if child.name.is_empty() || child.name.contains('/') {
                    return bad(format!("bad node name `{}` under `{path}`", child.name));
                }
                if child.count > node.count {
                    return bad(format!("`{path}/{}` outnumbers its parent", child.name));
                }
                check(child, templates, &format!("{path}/{}", child.name))?;
            }
            Ok(())
        }
        if self.templates == 0 || self.root.count != self.templates || self.root.kind != EntryKind::Dir {
            return Err(CensusError::InvalidDocument("root count must equal the template count".into()));
        }
        check(&self.root, self.templates, ".")
    }
}

/// Counts, for every (path, kind), how many templates contain it.
pub fn merge(listings: &[TemplateListing]) -> Result<FrequencyTree, CensusError> {
    if listings.is_empty() {
        return Err(CensusError::EmptyCorpus);
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut counts: BTreeMap<(&RelPath, EntryKind), usize> = BTreeMap::new();
    for listing in listings {
        if !seen.insert(listing.id.as_str()) {
            return Err(CensusError::DuplicateTemplateId(listing.id.clone()));
        }
        for (path, kind) in listing.entries() {
            *counts.entry((path, kind)).or_default() += 1;
        }
    }

    #[derive(Default)]
    struct Builder {
        count: usize,
        children: BTreeMap<(String, EntryKind), Builder>,
    }
    let mut root = Builder {
        count: listings.len(),
        ..Builder::default()
    };
    for ((path, kind), count) in counts {
        let parts: Vec<&str> = path.components().collect();
        let mut node = &mut root;
        for (i, part) in parts.iter().enumerate() {
            let k = if i + 1 == parts.len() { kind } else { EntryKind::Dir };
            node = node.children.entry(((*part).to_owned(), k)).or_default();
        }
        node.count = count;
    }
    fn finish(name: String, kind: EntryKind, builder: Builder) -> FrequencyNode {
        FrequencyNode {
            name,
            kind,
            count: builder.count,
            children: builder
                .children
                .into_iter()
                .map(|((name, kind), b)| finish(name, kind, b))
                .collect(),
        }
    }
    let mut root = finish(".".into(), EntryKind::Dir, root);
    root.sort();
    Ok(FrequencyTree {
        templates: listings.len(),
        root,
    })
}

/// Removes every node whose count is below `min_count` (values below 1
/// behave like 1). The root is always kept.
pub fn threshold(tree: &FrequencyTree, min_count: usize) -> FrequencyTree {
    fn prune(node: &FrequencyNode, min: usize) -> FrequencyNode {
        FrequencyNode {
            name: node.name.clone(),
            kind: node.kind,
            count: node.count,
            children: node
                .children
                .iter()
                .filter(|c| c.count >= min)
                .map(|c| prune(c, min))
                .collect(),
        }
    }
    FrequencyTree {
        templates: tree.templates,
        root: prune(&tree.root, min_count),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Json,
    Dot,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(Self::Json),
            "dot" => Ok(Self::Dot),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown format `{other}` (expected json, dot or csv)")),
        }
    }
}

pub fn emit(tree: &FrequencyTree, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => {
            let mut text = serde_json::to_string_pretty(tree).expect("tree serializes");
            text.push('\n');
            text
        }
        OutputFormat::Dot => emit_dot(tree),
        OutputFormat::Csv => emit_csv(tree),
    }
}

fn dot_id(path: &str, kind: EntryKind) -> String {
    serde_json::to_string(&format!("{}:{path}", kind.as_str())).expect("string serializes")
}

fn emit_dot(tree: &FrequencyTree) -> String {
    let mut out = String::from("digraph census {\n");
    let root_id = dot_id(".", EntryKind::Dir);
    out.push_str(&format!(
        "  {root_id} [label={}, kind=dir, count={}];\n",
        dot_id_label(".", tree.root.count),
        tree.root.count
    ));
    let mut edges = String::new();
    fn walk(node: &FrequencyNode, parent_id: &str, prefix: &str, out: &mut String, edges: &mut String) {
        for child in &node.children {
            let path = if prefix.is_empty() {
                child.name.clone()
            } else {
                format!("{prefix}/{}", child.name)
            };
            let id = dot_id(&path, child.kind);
            out.push_str(&format!(
                "  {id} [label={}, kind={}, count={}];\n",
                dot_id_label(&child.name, child.count),
                child.kind,
                child.count
            ));
            edges.push_str(&format!("  {parent_id} -> {id};\n"));
            walk(child, &id, &path, out, edges);
        }
    }
    walk(&tree.root, &root_id, "", &mut out, &mut edges);
    out.push_str(&edges);
    out.push_str("}\n");
    out
}

fn dot_id_label(name: &str, count: usize) -> String {
    serde_json::to_string(&format!("{name} ({count})")).expect("string serializes")
}

fn emit_csv(tree: &FrequencyTree) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(["path", "kind", "count"]).expect("in-memory write");
    for (path, node) in tree.nodes() {
        writer
            .write_record([path.as_str(), node.kind.as_str(), &node.count.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("csv output is UTF-8")
}

/// Reads a tree back from its JSON form and validates it.
pub fn parse_json(text: &str) -> Result<FrequencyTree, CensusError> {
    let tree: FrequencyTree =
        serde_json::from_str(text).map_err(|err| CensusError::InvalidDocument(err.to_string()))?;
    tree.validate()?;
    Ok(tree)
}
