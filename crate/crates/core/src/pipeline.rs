//! Ventilator → worker pool → result queues → merger → batcher.
//!
//! Two queue topologies are supported:
//!
//! * [`Mode::Shared`]: one work queue and one result queue shared by all
//!   workers. Delivery order follows completion order and is therefore racy.
//! * [`Mode::Dedicated`]: one work queue and one result queue per worker.
//!   Work item `k` goes to worker `k mod W` and the merger pops the result
//!   queues in the same fixed cycle, blocking on each queue in turn. The
//!   delivered order is the ventilated order no matter how fast each worker is.
//!
//! Each worker runs the cache-first fetch path of [`process_item`]. Every
//! queue ends with a sentinel; a fetch failure is reported on a separate fault
//! channel and stops the epoch.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, select, unbounded, Receiver, Sender, TryRecvError};
use serde::{Deserialize, Serialize};

use crate::cache::{CacheConfig, CacheError, FanoutCache};
use crate::dataset::{Manifest, RawRowGroup};
use crate::metrics::{ms, utilization, CacheReport, EpochReport, Fnv1a, StageTotals};
use crate::shuffle::{assign_worker, EpochPlan};
use crate::store::{LatencyModel, Store, StoreError, StorePolicy};
use crate::transform::{apply_row_transform, decode_columnar, DecodeError, Tensor, TransformSpec};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid reader config: {0}")]
    Config(String),
    #[error("worker {worker}: {source}")]
    Fetch { worker: usize, source: StoreError },
    #[error("decoding row group {group_id}: {source}")]
    Decode { group_id: u64, source: DecodeError },
    #[error("batching: {0}")]
    Batch(String),
    #[error("worker {0} exited without a sentinel")]
    WorkerLost(usize),
    #[error("pipeline thread panicked: {0}")]
    Panicked(String),
    #[error("opening cache: {0}")]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Shared,
    Dedicated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformSite {
    Worker,
    Consumer,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Shared => "shared",
            Mode::Dedicated => "dedicated",
        })
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shared" => Ok(Mode::Shared),
            "dedicated" => Ok(Mode::Dedicated),
            other => Err(format!(
                "unknown mode {other:?} (expected shared|dedicated)"
            )),
        }
    }
}

impl fmt::Display for TransformSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformSite::Worker => "worker",
            TransformSite::Consumer => "consumer",
        })
    }
}

impl FromStr for TransformSite {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "worker" => Ok(TransformSite::Worker),
            "consumer" => Ok(TransformSite::Consumer),
            other => Err(format!(
                "unknown transform site {other:?} (expected worker|consumer)"
            )),
        }
    }
}

/// Full reader configuration.
///
/// `Dedicated` + `Worker` is the optimized setup; `Shared` + `Consumer` is
/// the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReaderConfig {
    pub mode: Mode,
    pub transform_site: TransformSite,
    pub num_workers: usize,
    /// Capacity of each result (and work) queue, in items.
    pub queue_capacity: usize,
    pub base_seed: u64,
    pub epoch: u64,
    pub shard_id: usize,
    pub num_shards_distributed: usize,
    pub batch_size: usize,
    pub drop_last: bool,
    pub store_policy: StorePolicy,
    pub latency: LatencyModel,
    pub cache: Option<CacheConfig>,
    pub transform: TransformSpec,
    /// Simulated training-step cost per batch.
    pub consumer_step_ms: f64,
}

impl Default for ReaderConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Dedicated,
            transform_site: TransformSite::Worker,
            num_workers: 4,
            queue_capacity: 4,
            base_seed: 0,
            epoch: 0,
            shard_id: 0,
            num_shards_distributed: 1,
            batch_size: 1024,
            drop_last: false,
            store_policy: StorePolicy::default(),
            latency: LatencyModel::default(),
            cache: None,
            transform: TransformSpec::identity(),
            consumer_step_ms: 0.0,
        }
    }
}

impl ReaderConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.num_workers == 0 {
            return bad("num_workers must be >= 1");
        }
        if self.queue_capacity == 0 {
            return bad("queue_capacity must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.num_shards_distributed == 0 || self.shard_id >= self.num_shards_distributed {
            return bad("shard_id must be < num_shards_distributed (>= 1)");
        }
        if self.store_policy.max_attempts == 0 || self.store_policy.timeout_ms == 0 {
            return bad("store policy needs timeout_ms >= 1 and max_attempts >= 1");
        }
        if !(self.consumer_step_ms >= 0.0 && self.consumer_step_ms.is_finite()) {
            return bad("consumer_step_ms must be a finite non-negative number");
        }
        if let Some(c) = &self.cache {
            if c.num_shards == 0 {
                return bad("cache num_shards must be >= 1");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkItem {
    pub sequence_index: usize,
    pub group_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkMsg {
    Item(WorkItem),
    Sentinel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Still encoded; the consumer decodes and transforms it.
    Raw(RawRowGroup),
    /// Decoded and transformed.
    Ready(Tensor),
}

impl Payload {
    pub fn byte_len(&self) -> usize {
        match self {
            Payload::Raw(r) => r.len(),
            Payload::Ready(t) => t.data.len() * 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ItemTimings {
    pub fetch_ms: f64,
    pub decode_ms: f64,
    pub transform_ms: f64,
    pub cache_ms: f64,
}

impl ItemTimings {
    fn add_to(&self, totals: &mut StageTotals) {
        totals.fetch_ms += self.fetch_ms;
        totals.decode_ms += self.decode_ms;
        totals.transform_ms += self.transform_ms;
        totals.cache_ms += self.cache_ms;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultItem {
    pub sequence_index: usize,
    pub group_id: u64,
    pub worker: usize,
    pub payload: Payload,
    pub timings: ItemTimings,
    pub cache_hit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResultMsg {
    Item(ResultItem),
    Sentinel { worker: usize },
}

/// Shared read-only state a worker needs for [`process_item`].
#[derive(Debug, Clone)]
pub struct WorkerDeps {
    pub store: Store,
    pub cache: Option<Arc<FanoutCache>>,
    pub policy: StorePolicy,
    pub transform: TransformSpec,
    pub site: TransformSite,
}

/// Cache-first fetch of one row group.
///
/// A hit returns the cached, already transformed tensor and skips both the
/// store and the transform. A miss fetches from the store; with the worker
/// transform site the worker then decodes, transforms and offers the result
/// to the cache, otherwise the raw payload is handed to the consumer.
pub fn process_item(
    item: &WorkItem,
    worker: usize,
    deps: &WorkerDeps,
) -> Result<ResultItem, PipelineError> {
    let g = item.group_id;
    let mut timings = ItemTimings::default();
    let result = |payload, timings, cache_hit| ResultItem {
        sequence_index: item.sequence_index,
        group_id: g,
        worker,
        payload,
        timings,
        cache_hit,
    };

    if let Some(cache) = &deps.cache {
        let start = Instant::now();
        let hit = cache
            .get(g)
            .and_then(|bytes| Tensor::from_bytes(&bytes, g).ok());
        timings.cache_ms = ms(start.elapsed());
        if let Some(tensor) = hit {
            return Ok(result(Payload::Ready(tensor), timings, true));
        }
    }

    let start = Instant::now();
    let raw = deps
        .store
        .fetch_with_retry(g, &deps.policy)
        .map_err(|source| PipelineError::Fetch { worker, source })?;
    timings.fetch_ms = ms(start.elapsed());

    let payload = match deps.site {
        TransformSite::Consumer => Payload::Raw(raw),
        TransformSite::Worker => {
            let tensor = decode_and_transform(&raw, g, &deps.transform, &mut timings)?;
            offer_to_cache(deps.cache.as_deref(), &tensor, &mut timings);
            Payload::Ready(tensor)
        }
    };
    Ok(result(payload, timings, false))
}

fn decode_and_transform(
    raw: &RawRowGroup,
    group_id: u64,
    spec: &TransformSpec,
    timings: &mut ItemTimings,
) -> Result<Tensor, PipelineError> {
    let start = Instant::now();
    let tensor = decode_columnar(raw, group_id)
        .map_err(|source| PipelineError::Decode { group_id, source })?;
    timings.decode_ms += ms(start.elapsed());
    let start = Instant::now();
    let tensor = apply_row_transform(tensor, spec);
    timings.transform_ms += ms(start.elapsed());
    Ok(tensor)
}

/// Best effort: quota rejections and write failures only mean the next epoch misses.
fn offer_to_cache(cache: Option<&FanoutCache>, tensor: &Tensor, timings: &mut ItemTimings) {
    if let Some(cache) = cache {
        let start = Instant::now();
        let _ = cache.put(tensor.origin_group, &tensor.to_bytes());
        timings.cache_ms += ms(start.elapsed());
    }
}

/// Pushes the plan's work items onto the work queues, then the sentinels.
///
/// Dedicated mode expects one queue per worker; shared mode a single queue
/// that receives `num_workers` sentinels. Returns `false` if the queues were
/// torn down before ventilation finished.
pub fn ventilate(
    plan: &EpochPlan,
    mode: Mode,
    num_workers: usize,
    queues: &[Sender<WorkMsg>],
) -> bool {
    let send = |q: usize, msg| queues[q].send(msg).is_ok();
    for (k, &group_id) in plan.shard_slice.iter().enumerate() {
        let q = match mode {
            Mode::Dedicated => assign_worker(k, num_workers),
            Mode::Shared => 0,
        };
        let item = WorkItem {
            sequence_index: k,
            group_id,
        };
        if !send(q, WorkMsg::Item(item)) {
            return false;
        }
    }
    match mode {
        Mode::Dedicated => (0..num_workers).all(|q| send(q, WorkMsg::Sentinel)),
        Mode::Shared => (0..num_workers).all(|_| send(0, WorkMsg::Sentinel)),
    }
}

/// Items (and payload bytes) sitting in result queues, with high-water marks.
#[derive(Debug, Default)]
pub struct QueueGauge {
    items: AtomicI64,
    bytes: AtomicI64,
    peak_items: AtomicI64,
    peak_bytes: AtomicI64,
}

impl QueueGauge {
    fn pushed(&self, bytes: usize) {
        let items = self.items.fetch_add(1, Ordering::SeqCst) + 1;
        let total = self.bytes.fetch_add(bytes as i64, Ordering::SeqCst) + bytes as i64;
        self.peak_items.fetch_max(items, Ordering::SeqCst);
        self.peak_bytes.fetch_max(total, Ordering::SeqCst);
    }

    fn popped(&self, bytes: usize) {
        self.items.fetch_sub(1, Ordering::SeqCst);
        self.bytes.fetch_sub(bytes as i64, Ordering::SeqCst);
    }

    pub fn peak_items(&self) -> u64 {
        self.peak_items.load(Ordering::SeqCst).max(0) as u64
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes.load(Ordering::SeqCst).max(0) as u64
    }
}

/// Ordered stream of results.
///
/// Dedicated mode pops queue 0, 1, ..., W-1 in a fixed cycle and blocks on
/// each queue until that worker produces, skipping queues whose sentinel has
/// been seen. Shared mode takes whatever arrives first on the single queue.
/// Either way the stream ends after `W` sentinels, or right after the first
/// fault is forwarded.
pub struct Merger {
    mode: Mode,
    num_workers: usize,
    queues: Vec<Receiver<ResultMsg>>,
    faults: Receiver<PipelineError>,
    done: Vec<bool>,
    cursor: usize,
    sentinels: usize,
    finished: bool,
    gauge: Arc<QueueGauge>,
}

impl Merger {
    pub fn new(
        mode: Mode,
        num_workers: usize,
        queues: Vec<Receiver<ResultMsg>>,
        faults: Receiver<PipelineError>,
        gauge: Arc<QueueGauge>,
    ) -> Self {
        let expected = match mode {
            Mode::Dedicated => num_workers,
            Mode::Shared => 1,
        };
        assert_eq!(queues.len(), expected, "queue count does not match mode");
        Self {
            mode,
            num_workers,
            done: vec![false; queues.len()],
            queues,
            faults,
            cursor: 0,
            sentinels: 0,
            finished: false,
            gauge,
        }
    }

    pub fn sentinels_seen(&self) -> usize {
        self.sentinels
    }

    fn fail(&mut self, err: PipelineError) -> Option<Result<ResultItem, PipelineError>> {
        self.finished = true;
        Some(Err(err))
    }
}

impl Iterator for Merger {
    type Item = Result<ResultItem, PipelineError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if self.finished {
                return None;
            }
            if self.sentinels == self.num_workers {
                self.finished = true;
                return None;
            }
            let q = self.cursor;
            if self.done[q] {
                self.cursor = (q + 1) % self.queues.len();
                continue;
            }
            let msg = select! {
                recv(self.queues[q]) -> msg => msg,
                recv(self.faults) -> fault => match fault {
                    Ok(err) => return self.fail(err),
                    // All fault senders gone; fall back to a plain pop.
                    Err(_) => self.queues[q].recv(),
                },
            };
            match msg {
                Ok(ResultMsg::Item(item)) => {
                    self.gauge.popped(item.payload.byte_len());
                    if self.mode == Mode::Dedicated {
                        self.cursor = (q + 1) % self.queues.len();
                    }
                    return Some(Ok(item));
                }
                Ok(ResultMsg::Sentinel { .. }) => {
                    self.sentinels += 1;
                    if self.mode == Mode::Dedicated {
                        self.done[q] = true;
                        self.cursor = (q + 1) % self.queues.len();
                    }
                }
                Err(_) => {
                    // A worker that failed reports on the fault channel before exiting.
                    return match self.faults.try_recv() {
                        Ok(err) => self.fail(err),
                        Err(TryRecvError::Empty | TryRecvError::Disconnected) => {
                            self.fail(PipelineError::WorkerLost(q))
                        }
                    };
                }
            }
        }
    }
}

/// Rows `rows` of row group `group_id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub group_id: u64,
    pub rows: Range<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub num_cols: u32,
    /// Row-major, `num_rows() * num_cols` values.
    pub rows: Vec<f32>,
    pub provenance: Vec<Provenance>,
}

impl Batch {
    fn empty(num_cols: u32, capacity_rows: usize) -> Self {
        Self {
            num_cols,
            rows: Vec::with_capacity(capacity_rows * num_cols as usize),
            provenance: Vec::new(),
        }
    }

    pub fn num_rows(&self) -> usize {
        if self.num_cols == 0 {
            0
        } else {
            self.rows.len() / self.num_cols as usize
        }
    }
}

/// Concatenates tensors in arrival order and cuts them into fixed-size batches.
#[derive(Debug)]
pub struct Batcher {
    batch_size: usize,
    drop_last: bool,
    current: Option<Batch>,
}

impl Batcher {
    pub fn new(batch_size: usize, drop_last: bool) -> Self {
        assert!(batch_size >= 1, "batch_size must be >= 1");
        Self {
            batch_size,
            drop_last,
            current: None,
        }
    }

    /// Appends `tensor`, returning every batch it completed.
    pub fn push(&mut self, tensor: &Tensor) -> Result<Vec<Batch>, PipelineError> {
        let cols = tensor.num_cols;
        if let Some(cur) = &self.current {
            if cur.num_cols != cols {
                return Err(PipelineError::Batch(format!(
                    "group {} has {cols} columns, earlier groups have {}",
                    tensor.origin_group, cur.num_cols
                )));
            }
        }
        let mut full = Vec::new();
        let mut row = 0u32;
        while row < tensor.num_rows {
            let cur = self
                .current
                .get_or_insert_with(|| Batch::empty(cols, self.batch_size));
            let room = self.batch_size - cur.num_rows();
            let take = room.min((tensor.num_rows - row) as usize) as u32;
            let (a, b) = (
                row as usize * cols as usize,
                (row + take) as usize * cols as usize,
            );
            cur.rows.extend_from_slice(&tensor.data[a..b]);
            cur.provenance.push(Provenance {
                group_id: tensor.origin_group,
                rows: row..row + take,
            });
            row += take;
            if cur.num_rows() == self.batch_size {
                full.extend(self.current.take());
            }
        }
        Ok(full)
    }

    /// The trailing partial batch, unless `drop_last` is set.
    pub fn finish(self) -> Option<Batch> {
        if self.drop_last {
            None
        } else {
            self.current.filter(|b| b.num_rows() > 0)
        }
    }
}

pub fn batch<'a, I>(
    tensors: I,
    batch_size: usize,
    drop_last: bool,
) -> Result<Vec<Batch>, PipelineError>
where
    I: IntoIterator<Item = &'a Tensor>,
{
    let mut batcher = Batcher::new(batch_size, drop_last);
    let mut out = Vec::new();
    for t in tensors {
        out.extend(batcher.push(t)?);
    }
    out.extend(batcher.finish());
    Ok(out)
}

/// FNV-1a over the little-endian `(epoch, group_id)` pairs in delivery order.
pub fn sequence_hash<I>(delivered: I) -> u64
where
    I: IntoIterator<Item = (u64, u64)>,
{
    let mut h = Fnv1a::new();
    for (epoch, group) in delivered {
        h.write_u64(epoch);
        h.write_u64(group);
    }
    h.finish()
}

#[derive(Debug, Clone)]
pub struct EpochOutput {
    /// Group ids in delivery order.
    pub delivered: Vec<u64>,
    pub report: EpochReport,
}

struct LiveGuard(Arc<AtomicUsize>);

impl Drop for LiveGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn track(live: &Arc<AtomicUsize>) -> LiveGuard {
    live.fetch_add(1, Ordering::SeqCst);
    LiveGuard(Arc::clone(live))
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

/// A configured reader over one dataset. The cache persists across epochs.
#[derive(Debug)]
pub struct Reader {
    config: ReaderConfig,
    manifest: Arc<Manifest>,
    store: Store,
    cache: Option<Arc<FanoutCache>>,
    live: Arc<AtomicUsize>,
}

impl Reader {
    pub fn new(config: ReaderConfig, manifest: Manifest) -> Result<Self, PipelineError> {
        config.validate()?;
        let cache = match &config.cache {
            Some(c) => Some(Arc::new(FanoutCache::open(c.clone())?)),
            None => None,
        };
        let store = Store::new(&manifest, config.latency.clone());
        Ok(Self {
            config,
            manifest: Arc::new(manifest),
            store,
            cache,
            live: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn config(&self) -> &ReaderConfig {
        &self.config
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn cache(&self) -> Option<&FanoutCache> {
        self.cache.as_deref()
    }

    pub fn plan(&self, epoch: u64) -> EpochPlan {
        let c = &self.config;
        EpochPlan::new(
            self.manifest.num_groups(),
            c.base_seed,
            epoch,
            c.shard_id,
            c.num_shards_distributed,
            c.num_workers,
        )
    }

    /// Pipeline threads (ventilator, workers, fetch helpers) still alive.
    pub fn live_contexts(&self) -> usize {
        self.live.load(Ordering::SeqCst) + self.store.in_flight()
    }

    pub fn run_epoch(&self, epoch: u64) -> Result<EpochOutput, PipelineError> {
        self.run_epoch_with(epoch, |_| {})
    }

    /// Runs one epoch, handing every batch to `sink` before its simulated step.
    pub fn run_epoch_with<F>(&self, epoch: u64, mut sink: F) -> Result<EpochOutput, PipelineError>
    where
        F: FnMut(&Batch),
    {
        let cfg = &self.config;
        let workers = cfg.num_workers;
        let plan = self.plan(epoch);
        let cache_before = self.cache.as_ref().map(|c| c.stats()).unwrap_or_default();
        let deps = WorkerDeps {
            store: self.store.clone(),
            cache: self.cache.clone(),
            policy: cfg.store_policy,
            transform: cfg.transform,
            site: cfg.transform_site,
        };
        let gauge = Arc::new(QueueGauge::default());
        let cancel = AtomicBool::new(false);

        let started = Instant::now();
        let queues = match cfg.mode {
            Mode::Dedicated => workers,
            Mode::Shared => 1,
        };
        let cap = match cfg.mode {
            Mode::Dedicated => cfg.queue_capacity,
            Mode::Shared => cfg.queue_capacity * workers,
        };
        let (work_tx, work_rx): (Vec<_>, Vec<_>) = (0..queues).map(|_| bounded(cap)).unzip();
        let (result_tx, result_rx): (Vec<_>, Vec<_>) = (0..queues).map(|_| bounded(cap)).unzip();
        let (fault_tx, fault_rx) = unbounded::<PipelineError>();

        let mut delivered = Vec::with_capacity(plan.len());
        let mut stage_totals = StageTotals::default();
        let mut consumer_busy = Duration::ZERO;
        let mut rows_delivered = 0u64;
        let mut batches = 0u64;
        let mut failure: Option<PipelineError> = None;
        let mut sentinels = 0usize;
        let step = Duration::from_secs_f64(cfg.consumer_step_ms / 1000.0);

        thread::scope(|s| {
            let ventilator = {
                let guard = track(&self.live);
                let plan = &plan;
                let mode = cfg.mode;
                s.spawn(move || {
                    let _guard = guard;
                    ventilate(plan, mode, workers, &work_tx);
                })
            };

            let mut handles = Vec::with_capacity(workers);
            for w in 0..workers {
                let q = if cfg.mode == Mode::Dedicated { w } else { 0 };
                let rx = work_rx[q].clone();
                let tx = result_tx[q].clone();
                let fault_tx = fault_tx.clone();
                let guard = track(&self.live);
                let (deps, gauge, cancel) = (&deps, &gauge, &cancel);
                handles.push(s.spawn(move || {
                    let _guard = guard;
                    worker_loop(w, rx, tx, fault_tx, deps, gauge, cancel)
                }));
            }
            // Only worker-held endpoints may remain, so disconnects propagate.
            drop(work_rx);
            drop(result_tx);
            drop(fault_tx);

            let mut merger =
                Merger::new(cfg.mode, workers, result_rx, fault_rx, Arc::clone(&gauge));
            let mut batcher = Batcher::new(cfg.batch_size, cfg.drop_last);
            let mut emit = |batch: Batch, busy: &mut Duration, rows: &mut u64, count: &mut u64| {
                sink(&batch);
                *rows += batch.num_rows() as u64;
                *count += 1;
                let t = Instant::now();
                if !step.is_zero() {
                    thread::sleep(step);
                }
                *busy += t.elapsed();
            };

            for next in merger.by_ref() {
                let item = match next {
                    Ok(item) => item,
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                };
                delivered.push(item.group_id);
                item.timings.add_to(&mut stage_totals);
                let tensor = match item.payload {
                    Payload::Ready(t) => t,
                    Payload::Raw(raw) => {
                        let mut t = ItemTimings::default();
                        match decode_and_transform(&raw, item.group_id, &cfg.transform, &mut t) {
                            Ok(tensor) => {
                                offer_to_cache(self.cache.as_deref(), &tensor, &mut t);
                                t.add_to(&mut stage_totals);
                                tensor
                            }
                            Err(e) => {
                                failure = Some(e);
                                break;
                            }
                        }
                    }
                };
                match batcher.push(&tensor) {
                    Ok(full) => {
                        for b in full {
                            emit(b, &mut consumer_busy, &mut rows_delivered, &mut batches);
                        }
                    }
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            if failure.is_none() {
                if let Some(b) = batcher.finish() {
                    emit(b, &mut consumer_busy, &mut rows_delivered, &mut batches);
                }
            }
            sentinels = merger.sentinels_seen();

            // Tear down: dropping the merger closes the result queues, which
            // unblocks workers, which in turn closes the work queues.
            cancel.store(true, Ordering::SeqCst);
            drop(merger);
            for h in handles {
                match h.join() {
                    Ok(_) => {}
                    Err(p) => {
                        failure.get_or_insert(PipelineError::Panicked(panic_message(p)));
                    }
                }
            }
            if let Err(p) = ventilator.join() {
                failure.get_or_insert(PipelineError::Panicked(panic_message(p)));
            }
        });
        self.store.shutdown_in_flight();

        if let Some(err) = failure {
            return Err(err);
        }
        let wall = started.elapsed();

        let cache_after = self.cache.as_ref().map(|c| c.stats()).unwrap_or_default();
        let wall_ms = ms(wall);
        let consumer_busy_ms = ms(consumer_busy);
        let report = EpochReport {
            mode: cfg.mode,
            transform_site: cfg.transform_site,
            workers,
            epoch,
            dataset_id: self.manifest.fingerprint(),
            wall_ms,
            consumer_busy_ms,
            utilization: utilization(consumer_busy_ms, wall_ms).unwrap_or(0.0),
            rows_delivered,
            groups_delivered: delivered.len() as u64,
            batches,
            cache: CacheReport::between(&cache_before, &cache_after),
            stage_totals,
            sequence_hash: sequence_hash(delivered.iter().map(|&g| (epoch, g))),
            peak_queue_items: gauge.peak_items(),
            peak_queue_bytes: gauge.peak_bytes(),
            sentinels: sentinels as u64,
        };
        Ok(EpochOutput { delivered, report })
    }
}

fn worker_loop(
    id: usize,
    work: Receiver<WorkMsg>,
    results: Sender<ResultMsg>,
    faults: Sender<PipelineError>,
    deps: &WorkerDeps,
    gauge: &QueueGauge,
    cancel: &AtomicBool,
) {
    while let Ok(msg) = work.recv() {
        let item = match msg {
            WorkMsg::Sentinel => {
                let _ = results.send(ResultMsg::Sentinel { worker: id });
                return;
            }
            WorkMsg::Item(item) => item,
        };
        if cancel.load(Ordering::SeqCst) {
            return;
        }
        match process_item(&item, id, deps) {
            Ok(result) => {
                let bytes = result.payload.byte_len();
                gauge.pushed(bytes);
                if results.send(ResultMsg::Item(result)).is_err() {
                    gauge.popped(bytes);
                    return;
                }
            }
            Err(e) => {
                let _ = faults.send(e);
                return;
            }
        }
    }
}

/// One-shot convenience: opens a reader for `config` and runs `config.epoch`.
pub fn run_epoch(config: &ReaderConfig, manifest: &Manifest) -> Result<EpochOutput, PipelineError> {
    Reader::new(config.clone(), manifest.clone())?.run_epoch(config.epoch)
}
