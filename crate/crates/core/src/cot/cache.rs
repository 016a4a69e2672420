use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{write_atomic, Hop};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub model: String,
    pub hop: Hop,
    pub timestamp: u64,
    pub text: String,
}

/// Directory of rationale texts, one `<sha256-hex>.json` file per key.
/// Entries are never overwritten.
#[derive(Clone, Debug)]
pub struct RationaleCache {
    dir: PathBuf,
}

impl RationaleCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Lowercase hex SHA-256 of `(model, hop, prompt)`, fields NUL-separated.
    pub fn key(model: &str, hop: Hop, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(model.as_bytes());
        h.update([0]);
        h.update(hop.tag().as_bytes());
        h.update([0]);
        h.update(prompt.as_bytes());
        hex::encode(h.finalize())
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>> {
        let path = self.path_for(key);
        match fs::read_to_string(&path) {
            Ok(s) => serde_json::from_str(&s).map(Some).map_err(|e| Error::Parse {
                path,
                line: 1,
                message: e.to_string(),
            }),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Store `text` unless the key already exists; returns the stored entry.
    pub fn put(&self, key: &str, model: &str, hop: Hop, text: &str) -> Result<CacheEntry> {
        if let Some(existing) = self.get(key)? {
            return Ok(existing);
        }
        let entry = CacheEntry {
            model: model.to_string(),
            hop,
            timestamp: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            text: text.to_string(),
        };
        let bytes = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
        write_atomic(&self.path_for(key), &bytes)?;
        Ok(entry)
    }

    pub fn len(&self) -> Result<usize> {
        let rd = fs::read_dir(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        Ok(rd
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
            .count())
    }

    pub fn is_empty(&self) -> Result<bool> {
        self.len().map(|n| n == 0)
    }
}
