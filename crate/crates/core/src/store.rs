//! Simulated remote blob store with seeded latency, hanging groups and a
//! caller-side retry/timeout policy.
//!
//! Delays are keyed by `(latency_seed, group, attempt)` so the order in which
//! concurrent workers call [`Store::fetch`] cannot perturb them. Content is
//! read verbatim from the dataset directory and never depends on the latency
//! model.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::RecvTimeoutError;
use serde::{Deserialize, Serialize};

use crate::dataset::{row_group_file_name, Manifest, RawRowGroup};
use crate::shuffle::mix64;

const GROUP_KEY: u64 = 0x9E37_79B9_7F4A_7C15;
const ATTEMPT_KEY: u64 = 0xC2B2_AE3D_27D4_EB4F;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("row group {0} not found")]
    NotFound(u64),
    #[error("reading row group {group_id}: {source}")]
    Io { group_id: u64, source: io::Error },
    #[error("fetch of row group {group_id} timed out after {attempts} attempt(s)")]
    Timeout { group_id: u64, attempts: u32 },
    #[error("fetch of row group {0} cancelled by store shutdown")]
    Cancelled(u64),
}

impl StoreError {
    pub fn group_id(&self) -> u64 {
        match self {
            StoreError::NotFound(g) | StoreError::Cancelled(g) => *g,
            StoreError::Io { group_id, .. } | StoreError::Timeout { group_id, .. } => *group_id,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base_ms: u64,
    /// Exclusive upper bound on the added jitter.
    pub jitter_ms: u64,
    pub latency_seed: u64,
    /// Groups whose fetches never complete.
    pub hang_groups: BTreeSet<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorePolicy {
    pub timeout_ms: u64,
    pub max_attempts: u32,
}

impl Default for StorePolicy {
    fn default() -> Self {
        Self {
            timeout_ms: 1000,
            max_attempts: 3,
        }
    }
}

/// Delay in milliseconds for one fetch attempt (`attempt` starts at 1).
pub fn latency_for(model: &LatencyModel, group_id: u64, attempt: u32) -> u64 {
    if model.jitter_ms == 0 {
        return model.base_ms;
    }
    let key = model.latency_seed
        ^ group_id.wrapping_mul(GROUP_KEY)
        ^ (attempt as u64).wrapping_mul(ATTEMPT_KEY);
    model.base_ms + mix64(key) % model.jitter_ms
}

/// Wakes simulated waits when the store shuts down in-flight work.
#[derive(Debug, Default)]
struct HangGate {
    generation: Mutex<u64>,
    cv: Condvar,
}

impl HangGate {
    /// Waits for `limit` (forever when `None`). Returns `true` if released early.
    fn wait(&self, limit: Option<Duration>) -> bool {
        let mut gen = self.generation.lock().unwrap_or_else(|e| e.into_inner());
        let start_gen = *gen;
        let deadline = limit.map(|d| Instant::now() + d);
        while *gen == start_gen {
            match deadline {
                None => gen = self.cv.wait(gen).unwrap_or_else(|e| e.into_inner()),
                Some(deadline) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return false;
                    }
                    gen = self
                        .cv
                        .wait_timeout(gen, deadline - now)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
            }
        }
        true
    }

    fn release(&self) {
        *self.generation.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.cv.notify_all();
    }
}

#[derive(Debug)]
struct Inner {
    dir: PathBuf,
    num_groups: u64,
    latency: LatencyModel,
    gate: HangGate,
    helpers: Mutex<Vec<JoinHandle<()>>>,
    live_helpers: AtomicUsize,
}

/// Handle to the simulated store. Cheap to clone; clones share state.
#[derive(Debug, Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

struct LiveGuard<'a>(&'a AtomicUsize);

impl Drop for LiveGuard<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

impl Store {
    pub fn new(manifest: &Manifest, latency: LatencyModel) -> Self {
        Self {
            inner: Arc::new(Inner {
                dir: manifest.dataset_dir().to_path_buf(),
                num_groups: manifest.num_groups() as u64,
                latency,
                gate: HangGate::default(),
                helpers: Mutex::new(Vec::new()),
                live_helpers: AtomicUsize::new(0),
            }),
        }
    }

    pub fn latency_model(&self) -> &LatencyModel {
        &self.inner.latency
    }

    /// Single attempt with the first-attempt delay.
    pub fn fetch(&self, group_id: u64) -> Result<RawRowGroup, StoreError> {
        self.fetch_attempt(group_id, 1)
    }

    pub fn fetch_attempt(&self, group_id: u64, attempt: u32) -> Result<RawRowGroup, StoreError> {
        let inner = &self.inner;
        if group_id >= inner.num_groups {
            return Err(StoreError::NotFound(group_id));
        }
        if inner.latency.hang_groups.contains(&group_id) {
            inner.gate.wait(None);
            return Err(StoreError::Cancelled(group_id));
        }
        let delay = latency_for(&inner.latency, group_id, attempt);
        if delay > 0 && inner.gate.wait(Some(Duration::from_millis(delay))) {
            return Err(StoreError::Cancelled(group_id));
        }
        let path = inner.dir.join(row_group_file_name(group_id));
        match fs::read(&path) {
            Ok(bytes) => Ok(RawRowGroup::new(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::NotFound(group_id)),
            Err(source) => Err(StoreError::Io { group_id, source }),
        }
    }

    /// Up to `max_attempts` attempts, each bounded by `timeout_ms`.
    ///
    /// Attempts run on helper threads so a hanging one can be abandoned. A
    /// reply that arrives after its attempt's window closed is discarded.
    pub fn fetch_with_retry(
        &self,
        group_id: u64,
        policy: &StorePolicy,
    ) -> Result<RawRowGroup, StoreError> {
        let max_attempts = policy.max_attempts.max(1);
        let timeout = Duration::from_millis(policy.timeout_ms);
        let mut last_err = None;

        for attempt in 1..=max_attempts {
            let (tx, rx) = crossbeam_channel::bounded(1);
            let store = self.clone();
            self.inner.live_helpers.fetch_add(1, Ordering::SeqCst);
            let spawned = thread::Builder::new()
                .name(format!("fetch-g{group_id}-a{attempt}"))
                .spawn(move || {
                    let _live = LiveGuard(&store.inner.live_helpers);
                    let _ = tx.send(store.fetch_attempt(group_id, attempt));
                });
            match spawned {
                Ok(handle) => self.track(handle),
                Err(source) => {
                    self.inner.live_helpers.fetch_sub(1, Ordering::SeqCst);
                    return Err(StoreError::Io { group_id, source });
                }
            }

            match rx.recv_timeout(timeout) {
                Ok(Ok(raw)) => return Ok(raw),
                Ok(Err(StoreError::NotFound(g))) => return Err(StoreError::NotFound(g)),
                Ok(Err(e)) => last_err = Some(e),
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                    last_err = None
                }
            }
        }
        Err(last_err.unwrap_or(StoreError::Timeout {
            group_id,
            attempts: max_attempts,
        }))
    }

    fn track(&self, handle: JoinHandle<()>) {
        let mut helpers = self.inner.helpers.lock().unwrap_or_else(|e| e.into_inner());
        let mut i = 0;
        while i < helpers.len() {
            if helpers[i].is_finished() {
                let _ = helpers.swap_remove(i).join();
            } else {
                i += 1;
            }
        }
        helpers.push(handle);
    }

    /// Number of fetch helper threads still running.
    pub fn in_flight(&self) -> usize {
        self.inner.live_helpers.load(Ordering::SeqCst)
    }

    /// Wakes every hung or sleeping fetch and joins all helper threads.
    ///
    /// Fetches released this way fail with [`StoreError::Cancelled`]. Later
    /// fetches behave normally again.
    pub fn shutdown_in_flight(&self) {
        self.inner.gate.release();
        let handles: Vec<_> = {
            let mut helpers = self.inner.helpers.lock().unwrap_or_else(|e| e.into_inner());
            helpers.drain(..).collect()
        };
        for h in handles {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{encode_row_group, generate_dataset};

    fn model(base: u64, jitter: u64, seed: u64) -> LatencyModel {
        LatencyModel {
            base_ms: base,
            jitter_ms: jitter,
            latency_seed: seed,
            hang_groups: BTreeSet::new(),
        }
    }

    #[test]
    fn latency_examples() {
        let m = model(50, 0, 9);
        for g in 0..10 {
            for a in 1..4 {
                assert_eq!(latency_for(&m, g, a), 50);
            }
        }
        // Regression constant from a standalone evaluation of the mix64 formula.
        assert_eq!(latency_for(&model(0, 1000, 1), 0, 1), 8);
        let m = model(10, 40, 77);
        assert_eq!(latency_for(&m, 5, 2), latency_for(&m, 5, 2));
        for g in 0..200 {
            let d = latency_for(&m, g, 1);
            assert!((10..50).contains(&d));
        }
    }

    #[test]
    fn latency_depends_on_seed() {
        let a: Vec<u64> = (0..32)
            .map(|g| latency_for(&model(0, 50, 1), g, 1))
            .collect();
        let b: Vec<u64> = (0..32)
            .map(|g| latency_for(&model(0, 50, 2), g, 1))
            .collect();
        assert_ne!(a, b);
    }

    #[test]
    fn fetch_and_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(3, 4, 2, dir.path()).unwrap();
        let store = Store::new(&m, model(0, 0, 0));
        let raw = store.fetch(0).unwrap();
        assert_eq!(raw, encode_row_group(0, 4, m.schema));
        assert!(matches!(store.fetch(3), Err(StoreError::NotFound(3))));
    }

    #[test]
    fn fetch_sleeps_base_latency() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(1, 1, 1, dir.path()).unwrap();
        let store = Store::new(&m, model(50, 0, 0));
        let t = Instant::now();
        store.fetch(0).unwrap();
        assert!(t.elapsed() >= Duration::from_millis(50));
    }

    #[test]
    fn content_independent_of_latency_model() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(2, 8, 3, dir.path()).unwrap();
        let a = Store::new(&m, model(0, 0, 0)).fetch(1).unwrap();
        let b = Store::new(&m, model(1, 5, 1234))
            .fetch_attempt(1, 3)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn retry_success_first_attempt() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(2, 2, 2, dir.path()).unwrap();
        let store = Store::new(&m, model(0, 0, 0));
        let raw = store.fetch_with_retry(1, &StorePolicy::default()).unwrap();
        assert_eq!(raw, encode_row_group(1, 2, m.schema));
        store.shutdown_in_flight();
        assert_eq!(store.in_flight(), 0);
    }

    #[test]
    fn retry_times_out_on_hang() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(2, 2, 2, dir.path()).unwrap();
        let mut lm = model(0, 0, 0);
        lm.hang_groups.insert(1);
        let store = Store::new(&m, lm);
        let policy = StorePolicy {
            timeout_ms: 10,
            max_attempts: 2,
        };
        let t = Instant::now();
        let err = store.fetch_with_retry(1, &policy).unwrap_err();
        let elapsed = t.elapsed();
        assert!(matches!(
            err,
            StoreError::Timeout {
                group_id: 1,
                attempts: 2
            }
        ));
        assert!(elapsed >= Duration::from_millis(20));
        assert!(elapsed < Duration::from_millis(40), "{elapsed:?}");
        assert_eq!(store.in_flight(), 2);
        store.shutdown_in_flight();
        assert_eq!(store.in_flight(), 0);
        // A non-hanging group still works after shutdown.
        assert!(store.fetch_with_retry(0, &policy).is_ok());
    }

    #[test]
    fn retry_timeout_versus_latency() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(1, 2, 2, dir.path()).unwrap();
        let store = Store::new(&m, model(50, 0, 0));

        let tight = StorePolicy {
            timeout_ms: 40,
            max_attempts: 3,
        };
        let t = Instant::now();
        let err = store.fetch_with_retry(0, &tight).unwrap_err();
        let elapsed = t.elapsed().as_millis() as i64;
        assert!(matches!(err, StoreError::Timeout { attempts: 3, .. }));
        assert!((elapsed - 120).abs() <= 20, "elapsed {elapsed} ms");
        store.shutdown_in_flight();

        let loose = StorePolicy {
            timeout_ms: 60,
            max_attempts: 3,
        };
        let t = Instant::now();
        store.fetch_with_retry(0, &loose).unwrap();
        let elapsed = t.elapsed().as_millis() as i64;
        assert!((elapsed - 50).abs() <= 20, "elapsed {elapsed} ms");
    }

    #[test]
    fn retry_does_not_retry_missing_groups() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(1, 1, 1, dir.path()).unwrap();
        let store = Store::new(&m, model(0, 0, 0));
        assert!(matches!(
            store.fetch_with_retry(5, &StorePolicy::default()),
            Err(StoreError::NotFound(5))
        ));
    }
}
