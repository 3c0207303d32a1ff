//! Embedded on-disk record store: one JSON document per id under a directory.

use dashmap::DashMap;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt record {path}: {source}")]
    Corrupt {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error("invalid record id '{0}'")]
    InvalidId(String),
}

/// Records of one kind, cached in memory and written through to disk.
///
/// Writes to a given id are serialized; writes to different ids proceed in
/// parallel unless they share a cache shard. Files are replaced atomically by
/// rename, so a crash never leaves a half-written record.
pub struct JsonStore<T> {
    dir: PathBuf,
    records: DashMap<String, T>,
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl<T: Serialize + DeserializeOwned + Clone> JsonStore<T> {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let records = DashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
                continue;
            };
            let text = fs::read_to_string(&path)?;
            let record = serde_json::from_str(&text).map_err(|source| StoreError::Corrupt {
                path: path.clone(),
                source,
            })?;
            records.insert(id, record);
        }
        Ok(JsonStore { dir, records })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn put(&self, id: &str, record: &T) -> Result<(), StoreError> {
        if !valid_id(id) {
            return Err(StoreError::InvalidId(id.to_string()));
        }
        let text = serde_json::to_string_pretty(record)?;
        let mut slot = self.records.entry(id.to_string()).or_insert_with(|| record.clone());
        let tmp = self.dir.join(format!(".{id}.{}.tmp", uuid::Uuid::new_v4().simple()));
        fs::write(&tmp, text)?;
        fs::rename(&tmp, self.dir.join(format!("{id}.json")))?;
        *slot = record.clone();
        Ok(())
    }

    /// Applies `f` to the stored record under the id's write lock and persists
    /// the result. Returns `None` if the id is unknown.
    pub fn update<R>(&self, id: &str, f: impl FnOnce(&mut T) -> R) -> Result<Option<R>, StoreError> {
        let Some(mut slot) = self.records.get_mut(id) else {
            return Ok(None);
        };
        let mut next = slot.clone();
        let out = f(&mut next);
        let text = serde_json::to_string_pretty(&next)?;
        let tmp = self.dir.join(format!(".{id}.{}.tmp", uuid::Uuid::new_v4().simple()));
        fs::write(&tmp, text)?;
        fs::rename(&tmp, self.dir.join(format!("{id}.json")))?;
        *slot = next;
        Ok(Some(out))
    }

    pub fn get(&self, id: &str) -> Option<T> {
        self.records.get(id).map(|r| r.clone())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.records.contains_key(id)
    }

    pub fn values(&self) -> Vec<T> {
        self.records.iter().map(|r| r.value().clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Fresh opaque id with a readable prefix.
pub fn new_id(prefix: &str) -> String {
    format!("{prefix}_{}", uuid::Uuid::new_v4().simple())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let s: JsonStore<Vec<u32>> = JsonStore::open(dir.path()).unwrap();
        s.put("a", &vec![1, 2]).unwrap();
        s.update("a", |v| v.push(3)).unwrap();
        drop(s);
        let s: JsonStore<Vec<u32>> = JsonStore::open(dir.path()).unwrap();
        assert_eq!(s.get("a"), Some(vec![1, 2, 3]));
        assert_eq!(s.update("missing", |_| ()).unwrap(), None);
    }

    #[test]
    fn rejects_path_like_ids() {
        let dir = tempfile::tempdir().unwrap();
        let s: JsonStore<u32> = JsonStore::open(dir.path()).unwrap();
        assert!(matches!(s.put("../x", &1), Err(StoreError::InvalidId(_))));
        assert!(matches!(s.put("", &1), Err(StoreError::InvalidId(_))));
    }

    #[test]
    fn concurrent_updates_are_serialized_per_id() {
        let dir = tempfile::tempdir().unwrap();
        let s: Arc<JsonStore<u64>> = Arc::new(JsonStore::open(dir.path()).unwrap());
        s.put("counter", &0).unwrap();
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let s = &s;
                scope.spawn(move || {
                    for _ in 0..25 {
                        s.update("counter", |c| *c += 1).unwrap();
                    }
                });
            }
        });
        assert_eq!(s.get("counter"), Some(200));
        let reopened: JsonStore<u64> = JsonStore::open(dir.path()).unwrap();
        assert_eq!(reopened.get("counter"), Some(200));
    }
}
