//! Epoch reports, the utilization proxy and report comparison.
//!
//! All durations are milliseconds measured with [`std::time::Instant`].

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cache::CacheStats;
use crate::pipeline::{Mode, TransformSite};

pub const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv1a {
    pub const fn new() -> Self {
        Self(FNV_OFFSET_BASIS)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= *b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("wall time is zero; utilization is undefined")]
    ZeroWall,
    #[error("reports describe different datasets ({0} vs {1})")]
    DatasetMismatch(String, String),
    #[error("report I/O at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed report {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
}

pub fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

pub fn utilization(consumer_busy_ms: f64, wall_ms: f64) -> Result<f64, MetricsError> {
    if wall_ms <= 0.0 {
        return Err(MetricsError::ZeroWall);
    }
    Ok((consumer_busy_ms / wall_ms).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTotals {
    pub fetch_ms: f64,
    pub decode_ms: f64,
    pub transform_ms: f64,
    /// Time spent reading and deserializing cache hits.
    pub cache_ms: f64,
}

impl StageTotals {
    pub fn add(&mut self, other: &StageTotals) {
        self.fetch_ms += other.fetch_ms;
        self.decode_ms += other.decode_ms;
        self.transform_ms += other.transform_ms;
        self.cache_ms += other.cache_ms;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheReport {
    pub hits: u64,
    pub misses: u64,
    pub stored_bytes: u64,
    pub rejected_writes: u64,
}

impl CacheReport {
    /// Counters accumulated between two snapshots; `stored_bytes` is the level at `after`.
    pub fn between(before: &CacheStats, after: &CacheStats) -> Self {
        Self {
            hits: after.hits - before.hits,
            misses: after.misses - before.misses,
            stored_bytes: after.stored_bytes,
            rejected_writes: after.rejected_writes - before.rejected_writes,
        }
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

mod hex_u64 {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(s.trim_start_matches("0x"), 16).map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub mode: Mode,
    pub transform_site: TransformSite,
    pub workers: usize,
    pub epoch: u64,
    #[serde(with = "hex_u64")]
    pub dataset_id: u64,
    pub wall_ms: f64,
    pub consumer_busy_ms: f64,
    pub utilization: f64,
    pub rows_delivered: u64,
    pub groups_delivered: u64,
    pub batches: u64,
    pub cache: CacheReport,
    pub stage_totals: StageTotals,
    #[serde(with = "hex_u64")]
    pub sequence_hash: u64,
    pub peak_queue_items: u64,
    pub peak_queue_bytes: u64,
    pub sentinels: u64,
}

/// Totals over a multi-epoch run plus the per-epoch reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(with = "hex_u64")]
    pub dataset_id: u64,
    pub mode: Mode,
    pub transform_site: TransformSite,
    pub workers: usize,
    pub wall_ms: f64,
    pub consumer_busy_ms: f64,
    pub utilization: f64,
    pub epochs: Vec<EpochReport>,
}

impl RunSummary {
    pub fn from_epochs(epochs: Vec<EpochReport>) -> Result<Self, MetricsError> {
        let first = epochs.first().ok_or(MetricsError::ZeroWall)?;
        let wall_ms: f64 = epochs.iter().map(|e| e.wall_ms).sum();
        let consumer_busy_ms: f64 = epochs.iter().map(|e| e.consumer_busy_ms).sum();
        Ok(Self {
            dataset_id: first.dataset_id,
            mode: first.mode,
            transform_site: first.transform_site,
            workers: first.workers,
            wall_ms,
            consumer_busy_ms,
            utilization: utilization(consumer_busy_ms, wall_ms)?,
            epochs,
        })
    }
}

/// Anything with a dataset identity, a wall time and a utilization reading.
pub trait Measured {
    fn dataset_id(&self) -> u64;
    fn wall_ms(&self) -> f64;
    fn utilization(&self) -> f64;
}

impl Measured for EpochReport {
    fn dataset_id(&self) -> u64 {
        self.dataset_id
    }
    fn wall_ms(&self) -> f64 {
        self.wall_ms
    }
    fn utilization(&self) -> f64 {
        self.utilization
    }
}

impl Measured for RunSummary {
    fn dataset_id(&self) -> u64 {
        self.dataset_id
    }
    fn wall_ms(&self) -> f64 {
        self.wall_ms
    }
    fn utilization(&self) -> f64 {
        self.utilization
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline_wall_ms: f64,
    pub candidate_wall_ms: f64,
    /// `baseline wall / candidate wall`.
    pub speedup: f64,
    pub baseline_utilization: f64,
    pub candidate_utilization: f64,
    /// `candidate utilization - baseline utilization`.
    pub utilization_delta: f64,
}

pub fn compare_reports<A: Measured, B: Measured>(
    baseline: &A,
    candidate: &B,
) -> Result<Comparison, MetricsError> {
    if baseline.dataset_id() != candidate.dataset_id() {
        return Err(MetricsError::DatasetMismatch(
            format!("{:016x}", baseline.dataset_id()),
            format!("{:016x}", candidate.dataset_id()),
        ));
    }
    if candidate.wall_ms() <= 0.0 {
        return Err(MetricsError::ZeroWall);
    }
    Ok(Comparison {
        baseline_wall_ms: baseline.wall_ms(),
        candidate_wall_ms: candidate.wall_ms(),
        speedup: baseline.wall_ms() / candidate.wall_ms(),
        baseline_utilization: baseline.utilization(),
        candidate_utilization: candidate.utilization(),
        utilization_delta: candidate.utilization() - baseline.utilization(),
    })
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), MetricsError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| MetricsError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| MetricsError::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_report(report: &EpochReport, path: &Path) -> Result<(), MetricsError> {
    write_json(report, path)
}

pub fn read_report(path: &Path) -> Result<EpochReport, MetricsError> {
    read_json(path)
}
