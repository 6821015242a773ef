//! One run per project at a time.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::WorkflowError;

pub const LOCK_FILE: &str = ".kerblam.lock";

/// Held while a workflow runs; the lock file records the holder's pid so a
/// lock left by a dead process can be reclaimed.
#[derive(Debug)]
pub struct ProjectLock {
    path: PathBuf,
    released: bool,
}

fn process_alive(pid: u32) -> bool {
    #[cfg(unix)]
    {
        let Ok(pid) = libc::pid_t::try_from(pid) else {
            return false;
        };
        // SAFETY: signal 0 performs only the existence and permission checks.
        let rc = unsafe { libc::kill(pid, 0) };
        rc == 0 || io::Error::last_os_error().raw_os_error() == Some(libc::EPERM)
    }
    #[cfg(not(unix))]
    {
        let _ = pid;
        true
    }
}

impl ProjectLock {
    pub fn acquire(root: &Path) -> Result<Self, WorkflowError> {
        let path = root.join(LOCK_FILE);
        for _ in 0..3 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut file) => {
                    writeln!(file, "{}", std::process::id())
                        .and_then(|_| file.sync_all())
                        .map_err(|source| WorkflowError::Io {
                            path: path.clone(),
                            source,
                        })?;
                    return Ok(Self {
                        path,
                        released: false,
                    });
                }
                Err(err) if err.kind() == io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path)
                        .ok()
                        .and_then(|text| text.trim().parse::<u32>().ok());
                    match holder {
                        Some(pid) if process_alive(pid) => {
                            return Err(WorkflowError::ProjectLocked { pid })
                        }
                        _ => {
                            log::warn!("removing stale lock {}", path.display());
                            let _ = fs::remove_file(&path);
                        }
                    }
                }
                Err(source) => return Err(WorkflowError::Io { path, source }),
            }
        }
        Err(WorkflowError::ProjectLocked { pid: 0 })
    }

    pub fn release(mut self) -> Result<(), WorkflowError> {
        self.released = true;
        fs::remove_file(&self.path).map_err(|source| WorkflowError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

impl Drop for ProjectLock {
    fn drop(&mut self) {
        if !self.released {
            let _ = fs::remove_file(&self.path);
        }
    }
}
