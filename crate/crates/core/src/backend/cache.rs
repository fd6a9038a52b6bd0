//! Append-only response cache keyed by content hash.
//!
//! One file per entry, `<hash>.entry`:
//!
//! ```text
//! <request hash>\n
//! <metadata json>\n
//! <response bytes>
//! ```
//!
//! The metadata line carries the SHA-256 of the response bytes; entries whose
//! hash line or checksum do not match are discarded and re-fetched.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub backend: String,
    pub model: String,
    pub template_version: String,
    pub op: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredMeta {
    #[serde(flatten)]
    meta: EntryMeta,
    response_sha256: String,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub content_hash: String,
    pub response: String,
    pub hit_count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub writes: u64,
    pub discarded: u64,
}

pub struct ResponseCache {
    dir: PathBuf,
    memory: RwLock<HashMap<String, CacheEntry>>,
    write_lock: Mutex<()>,
    hits: AtomicU64,
    misses: AtomicU64,
    writes: AtomicU64,
    discarded: AtomicU64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ResponseCache {
            dir,
            memory: RwLock::new(HashMap::new()),
            write_lock: Mutex::new(()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            writes: AtomicU64::new(0),
            discarded: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn entry_path(&self, hash: &str) -> PathBuf {
        self.dir.join(format!("{hash}.entry"))
    }

    pub fn get(&self, hash: &str) -> Option<String> {
        if let Some(entry) = self.memory.write().get_mut(hash) {
            entry.hit_count += 1;
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Some(entry.response.clone());
        }
        match self.read_entry(hash) {
            Some(response) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                self.memory.write().insert(
                    hash.to_string(),
                    CacheEntry {
                        content_hash: hash.to_string(),
                        response: response.clone(),
                        hit_count: 1,
                    },
                );
                Some(response)
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    fn read_entry(&self, hash: &str) -> Option<String> {
        let path = self.entry_path(hash);
        let bytes = fs::read(&path).ok()?;
        match decode_entry(hash, &bytes) {
            Some(response) => Some(response),
            None => {
                log::warn!("discarding corrupt cache entry {}", path.display());
                self.discarded.fetch_add(1, Ordering::Relaxed);
                let _ = fs::remove_file(&path);
                None
            }
        }
    }

    pub fn put(&self, hash: &str, meta: &EntryMeta, response: &str) -> Result<()> {
        let _guard = self.write_lock.lock();
        let path = self.entry_path(hash);
        if !path.exists() {
            let stored = StoredMeta {
                meta: meta.clone(),
                response_sha256: sha256_hex(response.as_bytes()),
                bytes: response.len(),
            };
            let mut buf = Vec::with_capacity(response.len() + 256);
            buf.extend_from_slice(hash.as_bytes());
            buf.push(b'\n');
            buf.extend_from_slice(serde_json::to_string(&stored).expect("meta").as_bytes());
            buf.push(b'\n');
            buf.extend_from_slice(response.as_bytes());

            let tmp = self.dir.join(format!(".{hash}.tmp"));
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
            fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
            self.writes.fetch_add(1, Ordering::Relaxed);
        }
        self.memory
            .write()
            .entry(hash.to_string())
            .or_insert_with(|| CacheEntry {
                content_hash: hash.to_string(),
                response: response.to_string(),
                hit_count: 0,
            });
        Ok(())
    }

    pub fn entry(&self, hash: &str) -> Option<CacheEntry> {
        self.memory.read().get(hash).cloned()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
            discarded: self.discarded.load(Ordering::Relaxed),
        }
    }

    /// Number of entry files on disk.
    pub fn len_on_disk(&self) -> usize {
        fs::read_dir(&self.dir)
            .map(|rd| {
                rd.filter_map(|e| e.ok())
                    .filter(|e| e.path().extension().is_some_and(|x| x == "entry"))
                    .count()
            })
            .unwrap_or(0)
    }
}

fn decode_entry(hash: &str, bytes: &[u8]) -> Option<String> {
    let first_nl = bytes.iter().position(|&b| b == b'\n')?;
    if &bytes[..first_nl] != hash.as_bytes() {
        return None;
    }
    let rest = &bytes[first_nl + 1..];
    let second_nl = rest.iter().position(|&b| b == b'\n')?;
    let meta: StoredMeta = serde_json::from_slice(&rest[..second_nl]).ok()?;
    let body = &rest[second_nl + 1..];
    if body.len() != meta.bytes || sha256_hex(body) != meta.response_sha256 {
        return None;
    }
    String::from_utf8(body.to_vec()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> EntryMeta {
        EntryMeta {
            backend: "mock".into(),
            model: "m".into(),
            template_version: "v".into(),
            op: "extract_flat".into(),
        }
    }

    #[test]
    fn persists_across_instances() {
        let dir = tempfile::tempdir().unwrap();
        {
            let c = ResponseCache::open(dir.path()).unwrap();
            assert!(c.get("abc").is_none());
            c.put("abc", &meta(), "reply\nwith lines").unwrap();
            assert_eq!(c.get("abc").as_deref(), Some("reply\nwith lines"));
        }
        let c = ResponseCache::open(dir.path()).unwrap();
        assert_eq!(c.get("abc").as_deref(), Some("reply\nwith lines"));
        assert_eq!(c.stats().hits, 1);
        assert_eq!(c.len_on_disk(), 1);
    }

    #[test]
    fn corrupt_entry_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(dir.path()).unwrap();
        c.put("abc", &meta(), "good").unwrap();
        let path = dir.path().join("abc.entry");
        let mut bytes = fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 1] = b'X';
        fs::write(&path, bytes).unwrap();

        let fresh = ResponseCache::open(dir.path()).unwrap();
        assert!(fresh.get("abc").is_none());
        assert_eq!(fresh.stats().discarded, 1);
        assert!(!path.exists());
    }

    #[test]
    fn hash_line_must_match_file() {
        let dir = tempfile::tempdir().unwrap();
        let c = ResponseCache::open(dir.path()).unwrap();
        c.put("abc", &meta(), "good").unwrap();
        fs::copy(dir.path().join("abc.entry"), dir.path().join("def.entry")).unwrap();
        assert!(ResponseCache::open(dir.path()).unwrap().get("def").is_none());
    }
}
