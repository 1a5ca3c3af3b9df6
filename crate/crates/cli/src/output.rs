//! All-or-nothing file output.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

/// Files staged in memory and written together by [`Outputs::commit`].
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: impl Into<PathBuf>, contents: impl Into<Vec<u8>>) {
        self.files.push((path.into(), contents.into()));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    /// Writes every file to a temporary sibling first, then renames them all
    /// into place. On failure the temporaries are removed.
    pub fn commit(self) -> CliResult<()> {
        let mut staged = Vec::with_capacity(self.files.len());
        let result = (|| {
            for (path, bytes) in &self.files {
                if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                }
                let tmp = tmp_name(path);
                fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
                staged.push((tmp, path.clone()));
            }
            Ok(())
        })();
        if let Err(e) = result {
            for (tmp, _) in &staged {
                let _ = fs::remove_file(tmp);
            }
            return Err(e);
        }
        for (tmp, path) in &staged {
            fs::rename(tmp, path).map_err(|e| CliError::io(path, e))?;
        }
        Ok(())
    }
}

fn tmp_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    path.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_writes_everything() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::default();
        out.add(dir.path().join("a/b.txt"), "b");
        out.add(dir.path().join("c.txt"), "c");
        out.commit().unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("a/b.txt")).unwrap(), "b");
        assert_eq!(fs::read_to_string(dir.path().join("c.txt")).unwrap(), "c");
    }

    #[test]
    fn failed_commit_leaves_nothing_behind() {
        let dir = tempfile::tempdir().unwrap();
        // a regular file where a directory is needed
        fs::write(dir.path().join("blocker"), "x").unwrap();
        let mut out = Outputs::default();
        out.add(dir.path().join("ok.txt"), "ok");
        out.add(dir.path().join("blocker/inner.txt"), "no");
        assert!(matches!(out.commit(), Err(CliError::Io { .. })));
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("blocker")]);
    }
}
