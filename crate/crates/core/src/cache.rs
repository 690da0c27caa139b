//! Quota-managed fanout disk cache for pre-transformed tensors.
//!
//! Admission is fill-until-quota with no eviction: once a shard reaches its
//! share of the global quota, further writes are rejected and callers fall
//! back to the remote store. The global quota is split evenly across shards
//! so the write path needs no cross-shard coordination.
//!
//! On-disk layout:
//!
//! ```text
//! <root>/shard-<s>/g<group_id>.tns   = u32 LE payload length | payload
//! ```
//!
//! Entries are written to a temporary file and renamed into place.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::shuffle::mix64;

const ENTRY_HEADER: usize = 4;
const ENTRY_EXT: &str = "tns";

#[derive(Debug, thiserror::Error)]
pub enum CacheError {
    #[error("cache I/O at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid cache config: {0}")]
    Config(String),
    #[error("cannot cache an empty payload for key {0}")]
    EmptyPayload(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub root_dir: PathBuf,
    pub num_shards: u32,
    /// Global quota in payload bytes.
    pub quota_bytes: u64,
}

impl CacheConfig {
    pub fn per_shard_quota(&self) -> u64 {
        self.quota_bytes / self.num_shards.max(1) as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub stored_bytes: u64,
    pub rejected_writes: u64,
    pub corrupt_entries: u64,
}

pub fn shard_of(key: u64, num_shards: u32) -> u32 {
    (mix64(key) % num_shards as u64) as u32
}

pub fn entry_file_name(key: u64) -> String {
    format!("g{key}.{ENTRY_EXT}")
}

fn shard_dir_name(shard: u32) -> String {
    format!("shard-{shard}")
}

fn parse_entry_name(name: &str) -> Option<u64> {
    name.strip_prefix('g')?.strip_suffix(".tns")?.parse().ok()
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Default)]
struct ShardState {
    stored_bytes: u64,
    entries: HashMap<u64, u64>,
}

#[derive(Debug)]
pub struct FanoutCache {
    config: CacheConfig,
    shards: Vec<Mutex<ShardState>>,
    hits: AtomicU64,
    misses: AtomicU64,
    rejected_writes: AtomicU64,
    corrupt_entries: AtomicU64,
    tmp_counter: AtomicU64,
    /// Serializes stats snapshots against counter updates.
    snapshot: Mutex<()>,
}

impl FanoutCache {
    /// Opens (creating if needed) a cache directory. Entries already on disk
    /// count toward the quota.
    pub fn open(config: CacheConfig) -> Result<Self, CacheError> {
        if config.num_shards == 0 {
            return Err(CacheError::Config("num_shards must be >= 1".into()));
        }
        fs::create_dir_all(&config.root_dir).map_err(io_err(&config.root_dir))?;
        let mut shards = Vec::with_capacity(config.num_shards as usize);
        for s in 0..config.num_shards {
            let dir = config.root_dir.join(shard_dir_name(s));
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            let mut state = ShardState::default();
            for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let entry = entry.map_err(io_err(&dir))?;
                let name = entry.file_name();
                let Some(key) = name.to_str().and_then(parse_entry_name) else {
                    continue;
                };
                if shard_of(key, config.num_shards) != s {
                    continue;
                }
                let len = entry.metadata().map_err(io_err(&entry.path()))?.len();
                let payload = len.saturating_sub(ENTRY_HEADER as u64);
                state.stored_bytes += payload;
                state.entries.insert(key, payload);
            }
            shards.push(Mutex::new(state));
        }
        Ok(Self {
            config,
            shards,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            rejected_writes: AtomicU64::new(0),
            corrupt_entries: AtomicU64::new(0),
            tmp_counter: AtomicU64::new(0),
            snapshot: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    pub fn entry_path(&self, key: u64) -> PathBuf {
        self.config
            .root_dir
            .join(shard_dir_name(shard_of(key, self.config.num_shards)))
            .join(entry_file_name(key))
    }

    fn shard(&self, key: u64) -> &Mutex<ShardState> {
        &self.shards[shard_of(key, self.config.num_shards) as usize]
    }

    fn count(&self, counter: &AtomicU64) {
        let _g = self.snapshot.lock().unwrap_or_else(|e| e.into_inner());
        counter.fetch_add(1, Ordering::Relaxed);
    }

    /// Returns the stored payload, or `None` on a miss. Never touches the remote store.
    pub fn get(&self, key: u64) -> Option<Vec<u8>> {
        let path = self.entry_path(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(_) => {
                self.count(&self.misses);
                return None;
            }
        };
        let valid = bytes.len() >= ENTRY_HEADER && {
            let len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
            len > 0 && bytes.len() == ENTRY_HEADER + len
        };
        if !valid {
            let _ = fs::remove_file(&path);
            {
                let mut shard = self.shard(key).lock().unwrap_or_else(|e| e.into_inner());
                if let Some(len) = shard.entries.remove(&key) {
                    shard.stored_bytes -= len;
                }
            }
            self.count(&self.corrupt_entries);
            self.count(&self.misses);
            return None;
        }
        self.count(&self.hits);
        let mut bytes = bytes;
        bytes.drain(..ENTRY_HEADER);
        Some(bytes)
    }

    /// Stores `payload` if the key's shard has room under its quota.
    ///
    /// Returns `Ok(false)` when the quota rejects the write. A key that is
    /// already present is left untouched and reported as stored.
    pub fn put(&self, key: u64, payload: &[u8]) -> Result<bool, CacheError> {
        if payload.is_empty() {
            return Err(CacheError::EmptyPayload(key));
        }
        let len = payload.len() as u64;
        let path = self.entry_path(key);
        {
            let mut shard = self.shard(key).lock().unwrap_or_else(|e| e.into_inner());
            if shard.entries.contains_key(&key) || path.exists() {
                return Ok(true);
            }
            if shard.stored_bytes + len > self.config.per_shard_quota() {
                drop(shard);
                self.count(&self.rejected_writes);
                return Ok(false);
            }
            // Reserve before the write so concurrent puts cannot overshoot the quota.
            shard.stored_bytes += len;
            shard.entries.insert(key, len);
        }
        if let Err(e) = self.write_entry(&path, payload) {
            let mut shard = self.shard(key).lock().unwrap_or_else(|e| e.into_inner());
            shard.stored_bytes -= len;
            shard.entries.remove(&key);
            return Err(e);
        }
        Ok(true)
    }

    fn write_entry(&self, path: &Path, payload: &[u8]) -> Result<(), CacheError> {
        let len = u32::try_from(payload.len()).map_err(|_| {
            CacheError::Config(format!("payload of {} bytes too large", payload.len()))
        })?;
        let mut buf = Vec::with_capacity(ENTRY_HEADER + payload.len());
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(payload);
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("tmp-{}-{n}", std::process::id()));
        fs::write(&tmp, &buf).map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(|source| {
            let _ = fs::remove_file(&tmp);
            CacheError::Io {
                path: path.to_path_buf(),
                source,
            }
        })
    }

    pub fn stats(&self) -> CacheStats {
        let _g = self.snapshot.lock().unwrap_or_else(|e| e.into_inner());
        let stored_bytes = self
            .shards
            .iter()
            .map(|s| s.lock().unwrap_or_else(|e| e.into_inner()).stored_bytes)
            .sum();
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            stored_bytes,
            rejected_writes: self.rejected_writes.load(Ordering::Relaxed),
            corrupt_entries: self.corrupt_entries.load(Ordering::Relaxed),
        }
    }
}

/// Per-shard totals from walking a cache directory.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirSummary {
    pub entries: u64,
    pub stored_bytes: u64,
    pub shards: Vec<ShardSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub shard: u32,
    pub entries: u64,
    pub stored_bytes: u64,
}

/// Walks `root` without opening a cache. Fails if `root` does not exist.
pub fn scan_dir(root: &Path) -> Result<DirSummary, CacheError> {
    let mut shards = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name();
        let Some(shard) = name
            .to_str()
            .and_then(|n| n.strip_prefix("shard-"))
            .and_then(|n| n.parse::<u32>().ok())
        else {
            continue;
        };
        let dir = entry.path();
        let mut summary = ShardSummary {
            shard,
            entries: 0,
            stored_bytes: 0,
        };
        for file in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let file = file.map_err(io_err(&dir))?;
            if file
                .file_name()
                .to_str()
                .and_then(parse_entry_name)
                .is_none()
            {
                continue;
            }
            let len = file.metadata().map_err(io_err(&file.path()))?.len();
            summary.entries += 1;
            summary.stored_bytes += len.saturating_sub(ENTRY_HEADER as u64);
        }
        shards.push(summary);
    }
    shards.sort_by_key(|s| s.shard);
    Ok(DirSummary {
        entries: shards.iter().map(|s| s.entries).sum(),
        stored_bytes: shards.iter().map(|s| s.stored_bytes).sum(),
        shards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open(dir: &Path, shards: u32, quota: u64) -> FanoutCache {
        FanoutCache::open(CacheConfig {
            root_dir: dir.to_path_buf(),
            num_shards: shards,
            quota_bytes: quota,
        })
        .unwrap()
    }

    #[test]
    fn shard_of_examples() {
        assert!((0..1000).all(|k| shard_of(k, 1) == 0));
        assert_eq!(shard_of(77, 8), shard_of(77, 8));
        // Enumeration oracle counts: [136, 117, 117, 130, 109, 141, 119, 131].
        let mut counts = [0u32; 8];
        for k in 0..1000 {
            counts[shard_of(k, 8) as usize] += 1;
        }
        assert_eq!(counts, [136, 117, 117, 130, 109, 141, 119, 131]);
        assert!(counts.iter().all(|c| (90..=160).contains(c)));
    }

    #[test]
    fn empty_cache_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 4, 1 << 20);
        assert_eq!(cache.stats(), CacheStats::default());
        assert_eq!(cache.get(3), None);
        assert_eq!(cache.stats().misses, 1);
    }

    #[test]
    fn put_get_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 4, 1 << 20);
        assert!(cache.put(9, b"hello").unwrap());
        assert_eq!(cache.get(9).as_deref(), Some(&b"hello"[..]));
        let s = cache.stats();
        assert_eq!((s.hits, s.misses, s.stored_bytes), (1, 0, 5));
        // Present keys are not rewritten or double counted.
        assert!(cache.put(9, b"hello").unwrap());
        assert_eq!(cache.stats().stored_bytes, 5);
    }

    #[test]
    fn truncated_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 2, 1 << 20);
        cache.put(1, &[7u8; 64]).unwrap();
        let path = cache.entry_path(1);
        let f = fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(20).unwrap();
        assert_eq!(cache.get(1), None);
        let s = cache.stats();
        assert_eq!((s.corrupt_entries, s.misses, s.hits), (1, 1, 0));
        assert!(!path.exists());
    }

    #[test]
    fn zero_quota_rejects_everything() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 3, 0);
        for k in 0..10 {
            assert!(!cache.put(k, b"x").unwrap());
        }
        let s = cache.stats();
        assert_eq!((s.rejected_writes, s.stored_bytes), (10, 0));
    }

    #[test]
    fn empty_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 1, 100);
        assert!(matches!(
            cache.put(0, b""),
            Err(CacheError::EmptyPayload(0))
        ));
    }

    #[test]
    fn half_quota_matches_sequential_replay() {
        let dir = tempfile::tempdir().unwrap();
        let payload = vec![1u8; 100];
        let arrivals = [5u64, 2, 9, 0, 7, 3, 1, 8, 6, 4];
        let quota = 500;
        let cache = open(dir.path(), 1, quota);
        let accepted: Vec<u64> = arrivals
            .iter()
            .copied()
            .filter(|&k| cache.put(k, &payload).unwrap())
            .collect();

        // Replay of the admission rule: store while stored + len <= quota.
        let mut stored = 0u64;
        let mut expected = Vec::new();
        for k in arrivals {
            if stored + 100 <= quota {
                stored += 100;
                expected.push(k);
            }
        }
        assert_eq!(accepted, expected);
        assert_eq!(accepted, vec![5, 2, 9, 0, 7]);
    }

    #[test]
    fn stats_counter_arithmetic_and_fs_walk() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 4, 1 << 20);
        for k in 0..3 {
            assert!(cache.get(k).is_none());
        }
        let mut expected_bytes = 0;
        for k in 0..3 {
            let payload = vec![k as u8 + 1; 10 + k as usize];
            expected_bytes += payload.len() as u64;
            assert!(cache.put(k, &payload).unwrap());
        }
        for k in 0..3 {
            assert!(cache.get(k).is_some());
        }
        let s = cache.stats();
        assert_eq!((s.hits, s.misses), (3, 3));
        assert_eq!(s.stored_bytes, expected_bytes);

        // Independent accounting: sum of (file length - header) over the tree.
        let mut walked = 0;
        for shard in fs::read_dir(dir.path()).unwrap() {
            for f in fs::read_dir(shard.unwrap().path()).unwrap() {
                walked += f.unwrap().metadata().unwrap().len() - 4;
            }
        }
        assert_eq!(walked, s.stored_bytes);
        assert_eq!(scan_dir(dir.path()).unwrap().stored_bytes, s.stored_bytes);
        assert_eq!(scan_dir(dir.path()).unwrap().entries, 3);
    }

    #[test]
    fn reopen_counts_existing_entries_toward_quota() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = open(dir.path(), 1, 100);
            assert!(cache.put(0, &[1u8; 60]).unwrap());
        }
        let cache = open(dir.path(), 1, 100);
        assert_eq!(cache.stats().stored_bytes, 60);
        assert!(!cache.put(1, &[1u8; 60]).unwrap());
        assert_eq!(cache.get(0).unwrap().len(), 60);
    }

    #[test]
    fn concurrent_puts_respect_quota() {
        let dir = tempfile::tempdir().unwrap();
        let cache = open(dir.path(), 4, 4000);
        std::thread::scope(|s| {
            for t in 0..8u64 {
                let cache = &cache;
                s.spawn(move || {
                    for k in 0..50u64 {
                        let _ = cache.put(t * 1000 + k, &[3u8; 100]);
                    }
                });
            }
        });
        let stats = cache.stats();
        assert!(stats.stored_bytes <= 4000);
        assert_eq!(
            scan_dir(dir.path()).unwrap().stored_bytes,
            stats.stored_bytes
        );
    }

    #[test]
    fn scan_missing_dir_fails() {
        assert!(scan_dir(Path::new("/nonexistent/cache/dir")).is_err());
    }
}
