//! Content-addressed response cache.
//!
//! Entries are keyed by a digest over (kind, backend id, model knobs,
//! input) and persisted as one JSON file per key under the cache
//! directory. Writes of identical keys are idempotent, so concurrent
//! last-writer-wins is safe. An in-memory map fronts the disk store.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    kind: String,
    payload: serde_json::Value,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, serde_json::Value>>,
}

impl ResponseCache {
    pub fn new(dir: Option<PathBuf>) -> Result<Self, GatewayError> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)
                .map_err(|e| GatewayError::CacheIo(format!("{}: {e}", d.display())))?;
        }
        Ok(Self { dir, memory: Mutex::new(HashMap::new()) })
    }

    pub fn key(parts: &[&str]) -> String {
        let mut hasher = Sha256::new();
        for p in parts {
            hasher.update((p.len() as u64).to_le_bytes());
            hasher.update(p.as_bytes());
        }
        crate::graph::hex_prefix(&hasher.finalize(), 32)
    }

    fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    pub fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>, GatewayError> {
        if let Some(value) = self.memory.lock().unwrap().get(key) {
            let typed = serde_json::from_value(value.clone())
                .map_err(|e| GatewayError::CacheIo(format!("corrupt cached value: {e}")))?;
            return Ok(Some(typed));
        }
        let Some(path) = self.path_for(key) else { return Ok(None) };
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path)
            .map_err(|e| GatewayError::CacheIo(format!("{}: {e}", path.display())))?;
        let entry: CacheEntry = serde_json::from_str(&text)
            .map_err(|e| GatewayError::CacheIo(format!("{}: {e}", path.display())))?;
        self.memory.lock().unwrap().insert(key.to_string(), entry.payload.clone());
        let typed = serde_json::from_value(entry.payload)
            .map_err(|e| GatewayError::CacheIo(format!("corrupt cached value: {e}")))?;
        Ok(Some(typed))
    }

    pub fn put<T: Serialize>(&self, key: &str, kind: &str, value: &T) -> Result<(), GatewayError> {
        let payload = serde_json::to_value(value)
            .map_err(|e| GatewayError::CacheIo(format!("serialize: {e}")))?;
        self.memory.lock().unwrap().insert(key.to_string(), payload.clone());
        if let Some(path) = self.path_for(key) {
            let entry =
                CacheEntry { key: key.to_string(), kind: kind.to_string(), payload };
            let text = serde_json::to_string_pretty(&entry)
                .map_err(|e| GatewayError::CacheIo(format!("serialize: {e}")))?;
            fs::write(&path, text)
                .map_err(|e| GatewayError::CacheIo(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }

    /// Number of entries on disk (0 for a memory-only cache).
    pub fn disk_entries(&self) -> Result<usize, GatewayError> {
        let Some(dir) = &self.dir else { return Ok(0) };
        let mut count = 0;
        for entry in
            fs::read_dir(dir).map_err(|e| GatewayError::CacheIo(format!("{}: {e}", dir.display())))?
        {
            let entry =
                entry.map_err(|e| GatewayError::CacheIo(format!("{}: {e}", dir.display())))?;
            if entry.path().extension().is_some_and(|e| e == "json") {
                count += 1;
            }
        }
        Ok(count)
    }

    /// Remove every entry from disk and memory; returns removed disk count.
    pub fn clear(&self) -> Result<usize, GatewayError> {
        self.memory.lock().unwrap().clear();
        let Some(dir) = &self.dir else { return Ok(0) };
        let mut removed = 0;
        for entry in
            fs::read_dir(dir).map_err(|e| GatewayError::CacheIo(format!("{}: {e}", dir.display())))?
        {
            let entry =
                entry.map_err(|e| GatewayError::CacheIo(format!("{}: {e}", dir.display())))?;
            let path = entry.path();
            if path.extension().is_some_and(|e| e == "json") {
                fs::remove_file(&path)
                    .map_err(|e| GatewayError::CacheIo(format!("{}: {e}", path.display())))?;
                removed += 1;
            }
        }
        Ok(removed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn disk_entries_survive_a_new_cache_instance() {
        let dir = tempdir().unwrap();
        let cache = ResponseCache::new(Some(dir.path().to_path_buf())).unwrap();
        let key = ResponseCache::key(&["chat", "mock:1", "hello"]);
        cache.put(&key, "chat", &"response".to_string()).unwrap();
        assert_eq!(cache.disk_entries().unwrap(), 1);

        let fresh = ResponseCache::new(Some(dir.path().to_path_buf())).unwrap();
        let got: Option<String> = fresh.get(&key).unwrap();
        assert_eq!(got.as_deref(), Some("response"));
    }

    #[test]
    fn clear_removes_everything() {
        let dir = tempdir().unwrap();
        let cache = ResponseCache::new(Some(dir.path().to_path_buf())).unwrap();
        cache.put(&ResponseCache::key(&["a"]), "chat", &1u32).unwrap();
        cache.put(&ResponseCache::key(&["b"]), "chat", &2u32).unwrap();
        assert_eq!(cache.clear().unwrap(), 2);
        assert_eq!(cache.disk_entries().unwrap(), 0);
        let got: Option<u32> = cache.get(&ResponseCache::key(&["a"])).unwrap();
        assert!(got.is_none());
    }

    #[test]
    fn memory_only_cache_works_without_a_directory() {
        let cache = ResponseCache::new(None).unwrap();
        let key = ResponseCache::key(&["k"]);
        cache.put(&key, "embed", &vec![1.0, 2.0]).unwrap();
        let got: Option<Vec<f64>> = cache.get(&key).unwrap();
        assert_eq!(got, Some(vec![1.0, 2.0]));
        assert_eq!(cache.disk_entries().unwrap(), 0);
    }
}
