//! Append-only JSONL response cache.
//!
//! Each line is one [`CacheEntry`]. The file is never rewritten; the last
//! entry for a key wins. A line that does not parse (for example a record cut
//! short by a crash) is skipped when the file is opened.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::CacheKey;

/// File name inside the cache directory.
pub const CACHE_FILE: &str = "responses.jsonl";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache store {path} unavailable: {source}")]
    StoreUnavailable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("permission denied opening cache {0}")]
    PermissionDenied(PathBuf),
    #[error("disk full while writing cache {0}")]
    DiskFull(PathBuf),
    #[error("invalid cache entry: {0}")]
    InvalidEntry(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub response_text: String,
    pub finish_reason: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub backend_id: String,
    pub created_at: DateTime<Utc>,
}

#[derive(Debug)]
pub struct CacheStore {
    path: PathBuf,
    index: RwLock<HashMap<CacheKey, CacheEntry>>,
    writer: Mutex<File>,
    skipped_lines: usize,
}

impl CacheStore {
    /// Opens `<dir>/responses.jsonl`, creating the directory and file if needed.
    pub fn open_dir(dir: &Path) -> Result<Self, CacheError> {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        Self::open(&dir.join(CACHE_FILE))
    }

    pub fn open(path: &Path) -> Result<Self, CacheError> {
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| io_error(path, e))?;

        let mut index = HashMap::new();
        let mut skipped_lines = 0;
        let mut reader = BufReader::new(&file);
        let mut line = Vec::new();
        let mut line_no = 0;
        let mut ends_with_newline = true;
        loop {
            line.clear();
            let n = reader.read_until(b'\n', &mut line).map_err(|e| io_error(path, e))?;
            if n == 0 {
                break;
            }
            line_no += 1;
            ends_with_newline = line.last() == Some(&b'\n');
            let text = String::from_utf8_lossy(&line);
            if text.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CacheEntry>(text.trim_end()) {
                Ok(entry) if !entry.key.as_str().is_empty() => {
                    index.insert(entry.key.clone(), entry);
                }
                Ok(_) => {
                    skipped_lines += 1;
                    log::warn!("{}:{line_no}: cache entry with empty key skipped", path.display());
                }
                Err(e) => {
                    skipped_lines += 1;
                    log::warn!("{}:{line_no}: unreadable cache line skipped: {e}", path.display());
                }
            }
        }
        drop(reader);

        // A torn final record must not swallow the next appended one.
        if !ends_with_newline {
            file.seek(SeekFrom::End(0)).map_err(|e| io_error(path, e))?;
            file.write_all(b"\n").map_err(|e| write_error(path, e))?;
        }

        Ok(Self {
            path: path.to_path_buf(),
            index: RwLock::new(index),
            writer: Mutex::new(file),
            skipped_lines,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lines skipped while opening.
    pub fn skipped_lines(&self) -> usize {
        self.skipped_lines
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        self.index.read().unwrap().get(key).cloned()
    }

    /// Appends `entry` and syncs it to disk before indexing it.
    pub fn put(&self, entry: CacheEntry) -> Result<(), CacheError> {
        if entry.key.as_str().trim().is_empty() {
            return Err(CacheError::InvalidEntry("empty key".into()));
        }
        let mut line = serde_json::to_vec(&entry).map_err(|e| CacheError::InvalidEntry(e.to_string()))?;
        line.push(b'\n');
        {
            let mut file = self.writer.lock().unwrap();
            file.write_all(&line).map_err(|e| write_error(&self.path, e))?;
            file.sync_data().map_err(|e| write_error(&self.path, e))?;
        }
        self.index.write().unwrap().insert(entry.key.clone(), entry);
        Ok(())
    }

    /// Every entry currently on disk, in file order. Used by tests and tooling.
    pub fn read_all_lines(&self) -> Result<Vec<String>, CacheError> {
        let mut text = String::new();
        File::open(&self.path)
            .and_then(|mut f| f.read_to_string(&mut text))
            .map_err(|e| io_error(&self.path, e))?;
        Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
    }
}

fn io_error(path: &Path, source: std::io::Error) -> CacheError {
    match source.kind() {
        std::io::ErrorKind::PermissionDenied => CacheError::PermissionDenied(path.to_path_buf()),
        _ => CacheError::StoreUnavailable { path: path.to_path_buf(), source },
    }
}

fn write_error(path: &Path, source: std::io::Error) -> CacheError {
    match source.kind() {
        std::io::ErrorKind::StorageFull => CacheError::DiskFull(path.to_path_buf()),
        _ => io_error(path, source),
    }
}
