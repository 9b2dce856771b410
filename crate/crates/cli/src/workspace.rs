//! Workspace layout: one directory per stage, a lockfile against concurrent
//! runs, and all-or-nothing stage commits.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use crate::manifest::{digest_file, RunManifest, MANIFEST_FILE};

pub const LOCK_FILE: &str = ".lock";

/// Exclusive lock on a workspace; released on drop.
#[derive(Debug)]
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| {
                format!(
                    "workspace {} is locked by another run (delete {} if no run is active)",
                    root.display(),
                    path.display()
                )
            })?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    _lock: Lock,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)
            .with_context(|| format!("cannot create workspace {}", root.display()))?;
        let _lock = Lock::acquire(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            _lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    /// Outputs of an earlier stage, checked against its manifest. `command`
    /// is what the user should run when the stage is missing or stale.
    pub fn completed(&self, stage: &str, command: &str) -> Result<PathBuf> {
        let dir = self.stage_dir(stage);
        if !dir.join(MANIFEST_FILE).is_file() {
            bail!(
                "no completed `{stage}` stage in {}; run `{command}` first",
                self.root.display()
            );
        }
        RunManifest::verify(&dir)
            .with_context(|| format!("`{stage}` outputs changed since they were written; rerun `{command}`"))?;
        Ok(dir)
    }

    pub fn begin(&self, stage: &str) -> Result<Stage> {
        Stage::begin(self.stage_dir(stage))
    }
}

/// A stage being written into a temporary sibling directory. Committing
/// replaces the final directory; dropping without commit removes the
/// partial output.
#[derive(Debug)]
pub struct Stage {
    tmp: PathBuf,
    dest: PathBuf,
    started: Instant,
    committed: bool,
}

impl Stage {
    pub fn begin(dest: PathBuf) -> Result<Self> {
        let name = dest
            .file_name()
            .context("stage directory has no name")?
            .to_string_lossy()
            .into_owned();
        let parent = dest.parent().map(Path::to_path_buf).unwrap_or_default();
        fs::create_dir_all(&parent)?;
        let tmp = parent.join(format!(".{name}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir(&tmp).with_context(|| format!("cannot create {}", tmp.display()))?;
        Ok(Self {
            tmp,
            dest,
            started: Instant::now(),
            committed: false,
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.file(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }

    /// Digests every file, writes the manifest and moves the stage into place.
    pub fn commit(mut self, mut manifest: RunManifest) -> Result<PathBuf> {
        manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        manifest.outputs.clear();
        for rel in list_files(&self.tmp)? {
            let digest = digest_file(&self.tmp.join(&rel))?;
            manifest.outputs.insert(rel, digest);
        }
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.tmp.join(MANIFEST_FILE), json + "\n")?;
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest)
                .with_context(|| format!("cannot replace {}", self.dest.display()))?;
        }
        fs::rename(&self.tmp, &self.dest)
            .with_context(|| format!("cannot move stage into {}", self.dest.display()))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for Stage {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

/// Relative paths (with `/` separators) of every file under `dir`, sorted,
/// excluding the manifest.
pub fn list_files(dir: &Path) -> Result<Vec<String>> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                let rel = path.strip_prefix(base)?;
                let rel = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                if rel != MANIFEST_FILE {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest::new("test", "", &Default::default())
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let err = Workspace::open(dir.path()).unwrap_err();
        assert!(format!("{err:#}").contains("locked"));
        drop(ws);
        Workspace::open(dir.path()).unwrap();
    }

    #[test]
    fn dropped_stage_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        {
            let stage = ws.begin("prepare").unwrap();
            stage.write("a.txt", "x").unwrap();
        }
        let left: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .filter(|n| n != LOCK_FILE)
            .collect();
        assert!(left.is_empty(), "{left:?}");
    }

    #[test]
    fn committed_stage_replaces_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::open(dir.path()).unwrap();
        let stage = ws.begin("s").unwrap();
        stage.write("old.txt", "1").unwrap();
        stage.commit(manifest()).unwrap();
        let stage = ws.begin("s").unwrap();
        stage.write("sub/new.txt", "2").unwrap();
        let out = stage.commit(manifest()).unwrap();
        assert!(!out.join("old.txt").exists());
        let path = ws.completed("s", "propspan s").unwrap();
        fs::write(path.join("sub/new.txt"), "3").unwrap();
        let err = ws.completed("s", "propspan s").unwrap_err();
        assert!(format!("{err:#}").contains("sub/new.txt"), "{err:#}");
        let err = ws.completed("missing", "propspan missing").unwrap_err();
        assert!(err.to_string().contains("run `propspan missing` first"));
    }
}
