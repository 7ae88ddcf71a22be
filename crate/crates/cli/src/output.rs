//! Output directory bookkeeping. Files created by a command are removed
//! again if it fails; files that existed beforehand are left alone.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

pub struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    created: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create output dir `{}`", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), created_dir, created: Vec::new(), committed: false })
    }

    /// Path of `name` inside the output dir, tracked for cleanup if it does
    /// not exist yet.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        if !path.exists() && !self.created.contains(&path) {
            self.created.push(path.clone());
        }
        path
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.created {
            let _ = std::fs::remove_file(p);
        }
        if self.created_dir {
            let _ = std::fs::remove_dir(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn failure_removes_only_new_files() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("out");
        std::fs::create_dir(&dir).unwrap();
        std::fs::write(dir.join("old.txt"), "keep").unwrap();
        {
            let mut out = Outputs::new(&dir).unwrap();
            std::fs::write(out.file("old.txt"), "changed").unwrap();
            std::fs::write(out.file("new.txt"), "x").unwrap();
        }
        assert!(dir.join("old.txt").exists());
        assert!(!dir.join("new.txt").exists());

        let fresh = root.path().join("fresh");
        {
            let mut out = Outputs::new(&fresh).unwrap();
            std::fs::write(out.file("a.txt"), "x").unwrap();
        }
        assert!(!fresh.exists());
        let mut out = Outputs::new(&fresh).unwrap();
        std::fs::write(out.file("a.txt"), "x").unwrap();
        out.commit();
        assert!(fresh.join("a.txt").exists());
    }
}
