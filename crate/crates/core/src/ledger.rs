//! Append-only record of the artifacts a run produced.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::io_err;
use crate::{Error, Result};

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// config, checkpoint, manifest, report, status, ...
    pub kind: String,
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// JSON-lines ledger inside a run directory. Entries are only ever appended;
/// a later entry for the same path supersedes earlier ones.
#[derive(Debug, Clone)]
pub struct RunLedger {
    root: PathBuf,
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

impl RunLedger {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(io_err(&root))?;
        let root = std::path::absolute(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file(&self) -> PathBuf {
        self.root.join(LEDGER_FILE)
    }

    fn relative(&self, path: &Path) -> PathBuf {
        path.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
    }

    /// Hash `path` (absolute or run-relative) and append an entry for it.
    pub fn record(&self, kind: &str, path: impl AsRef<Path>, note: Option<String>) -> Result<LedgerEntry> {
        let path = path.as_ref();
        let abs = if path.is_absolute() { path.to_path_buf() } else { self.root.join(path) };
        let (sha256, bytes) = sha256_file(&abs)?;
        let entry = LedgerEntry { kind: kind.into(), path: self.relative(&abs), sha256, bytes, note };
        let file = self.file();
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&file).map_err(io_err(&file))?;
        writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(io_err(&file))?;
        Ok(entry)
    }

    /// Write `bytes` to a run-relative path and record it.
    pub fn write(&self, kind: &str, rel: impl AsRef<Path>, bytes: &[u8]) -> Result<LedgerEntry> {
        let abs = self.root.join(rel.as_ref());
        if let Some(dir) = abs.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(&abs, bytes).map_err(io_err(&abs))?;
        self.record(kind, &abs, None)
    }

    pub fn entries(&self) -> Result<Vec<LedgerEntry>> {
        let file = self.file();
        let Ok(f) = std::fs::File::open(&file) else { return Ok(Vec::new()) };
        let mut out = Vec::new();
        for line in std::io::BufReader::new(f).lines() {
            let line = line.map_err(io_err(&file))?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }

    /// Latest entry per path.
    pub fn current(&self) -> Result<BTreeMap<PathBuf, LedgerEntry>> {
        Ok(self.entries()?.into_iter().map(|e| (e.path.clone(), e)).collect())
    }

    /// Check that every current entry exists with the recorded hash.
    pub fn verify(&self) -> Result<()> {
        for (path, e) in self.current()? {
            let abs = self.root.join(&path);
            let (sha, _) = sha256_file(&abs)?;
            if sha != e.sha256 {
                return Err(Error::Checkpoint(format!("{} changed since it was recorded", path.display())));
            }
        }
        Ok(())
    }

    /// Current hash recorded for a path, if any.
    pub fn hash_of(&self, rel: impl AsRef<Path>) -> Result<Option<String>> {
        Ok(self.current()?.get(rel.as_ref()).map(|e| e.sha256.clone()))
    }
}
