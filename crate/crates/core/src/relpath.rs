//! Lexically normalized, forward-slash separated relative paths.

use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RelPathError {
    #[error("path is empty")]
    Empty,
    #[error("path `{0}` is absolute")]
    Absolute(String),
    #[error("path `{0}` contains a `..` segment")]
    ParentSegment(String),
    #[error("path `{0}` contains a control character")]
    ControlCharacter(String),
    #[error("path `{0}` is not valid UTF-8")]
    NotUtf8(String),
}

/// A relative path without `.`/`..` segments, stored with `/` separators.
///
/// Two `RelPath`s compare equal exactly when they name the same location
/// lexically; no filesystem access is involved.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RelPath(String);

impl RelPath {
    pub fn parse(raw: &str) -> Result<Self, RelPathError> {
        if raw.starts_with('/') {
            return Err(RelPathError::Absolute(raw.to_owned()));
        }
        if raw.chars().any(char::is_control) {
            return Err(RelPathError::ControlCharacter(raw.escape_debug().to_string()));
        }
        let mut parts = Vec::new();
        for segment in raw.split('/') {
            match segment {
                "" | "." => {}
                ".." => return Err(RelPathError::ParentSegment(raw.to_owned())),
                other => parts.push(other),
            }
        }
        if parts.is_empty() {
            return Err(RelPathError::Empty);
        }
        Ok(Self(parts.join("/")))
    }

    /// Converts a native relative path (e.g. one produced by stripping a root
    /// prefix off a walked entry).
    pub fn from_path(path: &Path) -> Result<Self, RelPathError> {
        let mut parts = Vec::new();
        for component in path.components() {
            match component {
                Component::Normal(part) => match part.to_str() {
                    Some(part) => parts.push(part),
                    None => return Err(RelPathError::NotUtf8(path.display().to_string())),
                },
                Component::CurDir => {}
                Component::ParentDir => {
                    return Err(RelPathError::ParentSegment(path.display().to_string()))
                }
                Component::RootDir | Component::Prefix(_) => {
                    return Err(RelPathError::Absolute(path.display().to_string()))
                }
            }
        }
        Self::parse(&parts.join("/"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn components(&self) -> impl Iterator<Item = &str> {
        self.0.split('/')
    }

    pub fn file_name(&self) -> &str {
        self.0.rsplit('/').next().unwrap_or(&self.0)
    }

    pub fn parent(&self) -> Option<RelPath> {
        self.0.rfind('/').map(|idx| Self(self.0[..idx].to_owned()))
    }

    pub fn join(&self, other: &RelPath) -> RelPath {
        Self(format!("{}/{}", self.0, other.0))
    }

    /// Component-wise prefix test; a path starts with itself.
    pub fn starts_with(&self, prefix: &RelPath) -> bool {
        self.0 == prefix.0
            || (self.0.len() > prefix.0.len()
                && self.0.starts_with(&prefix.0)
                && self.0.as_bytes()[prefix.0.len()] == b'/')
    }

    /// True when `self` lies strictly below `ancestor`.
    pub fn is_inside(&self, ancestor: &RelPath) -> bool {
        self.starts_with(ancestor) && self.0.len() > ancestor.0.len()
    }

    /// The remainder of `self` below `prefix`, or `None` if `self` is not
    /// strictly inside it.
    pub fn strip_prefix(&self, prefix: &RelPath) -> Option<RelPath> {
        if self.is_inside(prefix) {
            Some(Self(self.0[prefix.0.len() + 1..].to_owned()))
        } else {
            None
        }
    }

    pub fn to_path(&self, root: &Path) -> PathBuf {
        let mut out = root.to_path_buf();
        out.extend(self.components());
        out
    }
}

impl fmt::Display for RelPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for RelPath {
    type Err = RelPathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

impl TryFrom<String> for RelPath {
    type Error = RelPathError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<RelPath> for String {
    fn from(value: RelPath) -> Self {
        value.0
    }
}

impl AsRef<str> for RelPath {
    fn as_ref(&self) -> &str {
        &self.0
    }
}
