//! Append-only on-disk response cache.
//!
//! Entries live at `<root>/<first two hex chars>/<key>.entry` as JSON. A key
//! is written once; later writes of the same key are dropped, so concurrent
//! runs never clobber each other.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::DecodingParams;

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache io at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt cache entry {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("cache key {0} collides with a different request")]
    Collision(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    /// 128-bit truncated digest, used as the file name.
    pub hex: String,
    /// Full digest, stored in the entry to detect truncation collisions.
    pub fingerprint: String,
}

impl CacheKey {
    pub fn new(model_name: &str, decoding: &DecodingParams, prompt: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"reliable-eval/cache/1\0");
        for part in [model_name.as_bytes(), prompt.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
        h.update(decoding.temperature().to_bits().to_le_bytes());
        h.update(decoding.top_p().to_bits().to_le_bytes());
        h.update(decoding.max_tokens().to_le_bytes());
        let digest = hex::encode(h.finalize());
        CacheKey {
            hex: digest[..32].to_string(),
            fingerprint: digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub fingerprint: String,
    pub response_text: String,
    #[serde(default)]
    pub usage: Option<serde_json::Value>,
    pub created_at: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| CacheError::Io {
            path: root.clone(),
            source,
        })?;
        Ok(ResponseCache { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.root
            .join(&key.hex[..2])
            .join(format!("{}.entry", key.hex))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<CacheEntry>, CacheError> {
        let path = self.path_for(key);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(CacheError::Io { path, source }),
        };
        let entry: CacheEntry = serde_json::from_str(&text).map_err(|e| CacheError::Corrupt {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if entry.fingerprint != key.fingerprint {
            return Err(CacheError::Collision(key.hex.clone()));
        }
        Ok(Some(entry))
    }

    /// Stores an entry unless one already exists for the key.
    pub fn put(
        &self,
        key: &CacheKey,
        response_text: &str,
        usage: Option<serde_json::Value>,
    ) -> Result<(), CacheError> {
        let path = self.path_for(key);
        let dir = path.parent().expect("entries live in a shard directory");
        let io_err = |source| CacheError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io_err)?;
        let entry = CacheEntry {
            fingerprint: key.fingerprint.clone(),
            response_text: response_text.to_string(),
            usage,
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
        serde_json::to_writer(&mut tmp, &entry).map_err(|e| io_err(e.into()))?;
        tmp.flush().map_err(io_err)?;
        match tmp.persist_noclobber(&path) {
            Ok(_) => Ok(()),
            Err(e) if e.error.kind() == io::ErrorKind::AlreadyExists => Ok(()),
            Err(e) => Err(io_err(e.error)),
        }
    }
}
