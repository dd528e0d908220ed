//! On-disk run store: each run lives in a directory named by its
//! configuration hash, guarded by an advisory lock file, with `--force`
//! moving a previous run aside into an archive instead of deleting it.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::{Error, Result};

/// Environment variable overriding the output root.
pub const OUT_ENV: &str = "SSLBENCH_OUT";
const LOCK_FILE: &str = ".lock";
const CONFIG_FILE: &str = "config.txt";

/// A directory of runs indexed by configuration hash.
#[derive(Debug, Clone)]
pub struct RunStore {
    pub root: PathBuf,
}

impl RunStore {
    /// Resolve the root: an explicit path wins, then `SSLBENCH_OUT`, then
    /// `./runs`.
    pub fn resolve(explicit: Option<&Path>) -> Self {
        let root = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        Self { root }
    }

    pub fn run_dir(&self, hash: &str) -> PathBuf {
        self.root.join(hash)
    }

    /// Whether a finished or in-progress run exists for the hash.
    pub fn exists(&self, hash: &str) -> bool {
        self.run_dir(hash).is_dir()
    }

    /// All run hashes currently present.
    pub fn list(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        if !self.root.is_dir() {
            return Ok(out);
        }
        for entry in fs::read_dir(&self.root)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if entry.file_type()?.is_dir() && name != "archive" {
                out.push(name);
            }
        }
        out.sort();
        Ok(out)
    }

    /// Create (and lock) the run directory for a configuration. An existing
    /// run is an error unless `force`, which moves it into
    /// `archive/<hash>-<n>` first. The configuration's canonical form is
    /// written into the new directory.
    pub fn create_run(&self, config: &Config, force: bool) -> Result<RunHandle> {
        let hash = config.hash();
        let dir = self.run_dir(&hash);
        if dir.exists() {
            if dir.join(LOCK_FILE).exists() {
                return Err(Error::Invalid(format!(
                    "run {} is locked by another process (remove {} if stale)",
                    hash,
                    dir.join(LOCK_FILE).display()
                )));
            }
            if !force {
                return Err(Error::RunExists(dir.display().to_string()));
            }
            self.archive(&hash)?;
        }
        fs::create_dir_all(&dir)?;
        let lock = dir.join(LOCK_FILE);
        // advisory lock: exclusive creation fails if another process holds it
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Invalid(format!(
                    "run {} is locked by another process (remove {} if stale)",
                    hash,
                    lock.display()
                )));
            }
            Err(e) => return Err(e.into()),
        }
        fs::write(dir.join(CONFIG_FILE), config.canonical())?;
        Ok(RunHandle { hash, dir, lock })
    }

    /// Reopen an existing unlocked run read-only.
    pub fn open_run(&self, hash: &str) -> Result<PathBuf> {
        let dir = self.run_dir(hash);
        if !dir.is_dir() {
            return Err(Error::Invalid(format!("no run {hash} under {}", self.root.display())));
        }
        Ok(dir)
    }

    fn archive(&self, hash: &str) -> Result<()> {
        let archive_root = self.root.join("archive");
        fs::create_dir_all(&archive_root)?;
        let mut n = 0;
        loop {
            let dst = archive_root.join(format!("{hash}-{n}"));
            if !dst.exists() {
                fs::rename(self.run_dir(hash), dst)?;
                return Ok(());
            }
            n += 1;
        }
    }
}

/// A locked, writable run directory. Dropping the handle releases the lock.
#[derive(Debug)]
pub struct RunHandle {
    pub hash: String,
    pub dir: PathBuf,
    lock: PathBuf,
}

impl RunHandle {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

impl Drop for RunHandle {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(v: u32) -> Config {
        Config::parse(&format!("seed={v}\ntask=classification\n")).unwrap()
    }

    #[test]
    fn create_collide_force_archives() {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore { root: tmp.path().join("runs") };
        let c = cfg(1);
        let h = {
            let run = store.create_run(&c, false).unwrap();
            std::fs::write(run.path("result.json"), "{}").unwrap();
            run.hash.clone()
        };
        // same config again: refused with the run path in the message
        match store.create_run(&c, false) {
            Err(Error::RunExists(p)) => assert!(p.contains(&h)),
            other => panic!("expected RunExists, got {other:?}"),
        }
        // force moves the old run into the archive
        let run2 = store.create_run(&c, true).unwrap();
        assert!(run2.dir.is_dir());
        assert!(!run2.path("result.json").exists());
        let archived = store.root.join("archive").join(format!("{h}-0"));
        assert!(archived.join("result.json").exists());
        // a second force adds -1
        drop(run2);
        let _run3 = store.create_run(&c, true).unwrap();
        assert!(store.root.join("archive").join(format!("{h}-1")).exists());
    }

    #[test]
    fn lock_is_exclusive_and_released_on_drop() {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore { root: tmp.path().to_path_buf() };
        let c = cfg(2);
        let run = store.create_run(&c, false).unwrap();
        // a concurrent force-create sees the fresh directory but a held lock
        assert!(store.create_run(&c, true).is_err());
        let dir = run.dir.clone();
        drop(run);
        assert!(!dir.join(LOCK_FILE).exists());
    }

    #[test]
    fn list_and_config_snapshot() {
        let tmp = tempfile::tempdir().unwrap();
        let store = RunStore { root: tmp.path().to_path_buf() };
        let a = store.create_run(&cfg(3), false).unwrap();
        let b = store.create_run(&cfg(4), false).unwrap();
        let mut expect = vec![a.hash.clone(), b.hash.clone()];
        expect.sort();
        assert_eq!(store.list().unwrap(), expect);
        let text = std::fs::read_to_string(a.path(CONFIG_FILE)).unwrap();
        assert_eq!(Config::parse(&text).unwrap().hash(), a.hash);
    }
}
