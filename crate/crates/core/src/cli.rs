//! Command-line front end: `gen`, `bench`, `verify` and `cache-stats`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cache::{scan_dir, CacheConfig};
use crate::dataset::{generate_dataset, load_manifest, Manifest, MANIFEST_FILE};
use crate::metrics::{write_json, RunSummary};
use crate::pipeline::{Mode, Reader, ReaderConfig, TransformSite};
use crate::store::{LatencyModel, StorePolicy};
use crate::transform::{calibrate_spin, TransformSpec};

/// Like `println!`, but a closed stdout is not fatal.
macro_rules! out {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "rgload",
    version,
    about = "Row-group data loading benchmark harness"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Run the pipeline for one or more epochs and report throughput.
    Bench(BenchArgs),
    /// Check that sequence hashes agree across a worker/latency/cache grid.
    Verify(VerifyArgs),
    /// Summarize the contents of a cache directory.
    CacheStats(CacheStatsArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub groups: u64,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub rows: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub cols: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Shared queues, consumer-side transform, no caching.
    Baseline,
    /// Dedicated queues, worker-side transform, ample cache quota.
    Optimized,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long = "transform-site")]
    pub transform_site: Option<TransformSite>,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub workers: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long = "cache-dir")]
    pub cache_dir: Option<PathBuf>,
    /// Global cache quota in bytes (default: unlimited, or 0 for the baseline preset).
    #[arg(long = "cache-quota")]
    pub cache_quota: Option<u64>,
    #[arg(long = "cache-shards", default_value_t = 8, value_parser = clap::value_parser!(u32).range(1..))]
    pub cache_shards: u32,
    /// Delete the cache directory before the first epoch.
    #[arg(long = "wipe-cache")]
    pub wipe_cache: bool,
    #[arg(long = "remote-latency-ms", default_value_t = 0)]
    pub remote_latency_ms: u64,
    #[arg(long = "jitter-ms", default_value_t = 0)]
    pub jitter_ms: u64,
    #[arg(long = "latency-seed", default_value_t = 0)]
    pub latency_seed: u64,
    #[arg(long = "hang-groups", value_delimiter = ',')]
    pub hang_groups: Vec<u64>,
    #[arg(long = "timeout-ms", default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    pub timeout_ms: u64,
    #[arg(long = "max-attempts", default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub max_attempts: u32,
    #[arg(long = "step-ms", default_value_t = 0.0)]
    pub step_ms: f64,
    #[arg(long = "batch-size", default_value_t = 1024, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long = "drop-last")]
    pub drop_last: bool,
    #[arg(long = "queue-capacity", default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub queue_capacity: u64,
    #[arg(long = "shard-id", default_value_t = 0)]
    pub shard_id: usize,
    #[arg(long = "num-shards", default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub num_shards: u64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub scale: f32,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub offset: f32,
    /// Extra transform passes per element (CPU cost knob).
    #[arg(long, default_value_t = 0)]
    pub spin: u32,
    /// Calibrate `--spin` so the transform costs about this many ms per group.
    #[arg(long = "transform-cost-ms", conflicts_with = "spin")]
    pub transform_cost_ms: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(2..))]
    pub runs: u64,
    #[arg(
        long = "workers-grid",
        value_delimiter = ',',
        default_value = "1,2,4,8"
    )]
    pub workers_grid: Vec<usize>,
    #[arg(
        long = "latency-seeds",
        value_delimiter = ',',
        default_value = "7,11,13"
    )]
    pub latency_seeds: Vec<u64>,
    #[command(flatten)]
    pub bench: BenchArgs,
}

#[derive(Debug, Args)]
pub struct CacheStatsArgs {
    #[arg(long = "cache-dir")]
    pub cache_dir: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Runtime(e.to_string())
}

impl BenchArgs {
    pub fn effective_mode(&self) -> Mode {
        self.mode.unwrap_or(match self.preset {
            Some(Preset::Baseline) => Mode::Shared,
            _ => Mode::Dedicated,
        })
    }

    pub fn effective_site(&self) -> TransformSite {
        self.transform_site.unwrap_or(match self.preset {
            Some(Preset::Baseline) => TransformSite::Consumer,
            _ => TransformSite::Worker,
        })
    }

    pub fn effective_quota(&self) -> u64 {
        self.cache_quota.unwrap_or(match self.preset {
            Some(Preset::Baseline) => 0,
            _ => u64::MAX,
        })
    }

    /// Reader configuration, with the cache rooted at `cache_dir` if any.
    pub fn reader_config(&self, manifest: &Manifest, cache_dir: Option<&Path>) -> ReaderConfig {
        let mut transform = TransformSpec {
            scale: self.scale,
            offset: self.offset,
            spin_iterations: self.spin,
        };
        if let Some(target) = self.transform_cost_ms {
            let rows = manifest.groups.first().map_or(1, |g| g.num_rows);
            transform.spin_iterations = calibrate_spin(
                rows,
                manifest.schema.num_cols,
                &transform,
                Duration::from_secs_f64(target.max(0.0) / 1000.0),
            );
        }
        ReaderConfig {
            mode: self.effective_mode(),
            transform_site: self.effective_site(),
            num_workers: self.workers as usize,
            queue_capacity: self.queue_capacity as usize,
            base_seed: self.seed,
            epoch: 0,
            shard_id: self.shard_id,
            num_shards_distributed: self.num_shards as usize,
            batch_size: self.batch_size as usize,
            drop_last: self.drop_last,
            store_policy: StorePolicy {
                timeout_ms: self.timeout_ms,
                max_attempts: self.max_attempts,
            },
            latency: LatencyModel {
                base_ms: self.remote_latency_ms,
                jitter_ms: self.jitter_ms,
                latency_seed: self.latency_seed,
                hang_groups: self.hang_groups.iter().copied().collect(),
            },
            cache: cache_dir.map(|dir| CacheConfig {
                root_dir: dir.to_path_buf(),
                num_shards: self.cache_shards,
                quota_bytes: self.effective_quota(),
            }),
            transform,
            consumer_step_ms: self.step_ms,
        }
    }
}

/// Runs `epochs` consecutive epochs over one persistent reader.
pub fn run_epochs(
    config: ReaderConfig,
    manifest: Manifest,
    epochs: u64,
) -> Result<RunSummary, CliError> {
    let reader = Reader::new(config, manifest).map_err(runtime)?;
    let mut reports = Vec::with_capacity(epochs as usize);
    for e in 0..epochs {
        reports.push(reader.run_epoch(e).map_err(runtime)?.report);
    }
    RunSummary::from_epochs(reports).map_err(runtime)
}

fn wipe(dir: &Path) -> Result<(), CliError> {
    match fs::remove_dir_all(dir) {
        Ok(()) => Ok(()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(CliError::Runtime(format!("wiping {}: {e}", dir.display()))),
    }
}

fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let m = generate_dataset(args.groups, args.rows, args.cols, &args.out).map_err(runtime)?;
    out!("{}", args.out.join(MANIFEST_FILE).display());
    eprintln!(
        "wrote {} row groups ({} bytes each)",
        m.groups.len(),
        m.groups[0].byte_size
    );
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&args.manifest).map_err(runtime)?;
    // The optimized preset always caches; fall back to a scratch directory.
    let scratch = match (&args.cache_dir, args.preset) {
        (None, Some(Preset::Optimized)) => Some(tempfile::tempdir().map_err(runtime)?),
        _ => None,
    };
    let cache_dir = args
        .cache_dir
        .as_deref()
        .or_else(|| scratch.as_ref().map(|d| d.path()));
    if args.wipe_cache {
        if let Some(dir) = cache_dir {
            wipe(dir)?;
        }
    }
    let config = args.reader_config(&manifest, cache_dir);
    let summary = run_epochs(config, manifest, args.epochs)?;
    for r in &summary.epochs {
        out!(
            "epoch {}: utilization {:.3} wall_ms {:.1} hits {} misses {} hash {:016x}",
            r.epoch,
            r.utilization,
            r.wall_ms,
            r.cache.hits,
            r.cache.misses,
            r.sequence_hash
        );
    }
    out!(
        "summary: mode {} site {} workers {} wall_ms {:.1} utilization {:.3}",
        summary.mode,
        summary.transform_site,
        summary.workers,
        summary.wall_ms,
        summary.utilization
    );
    if let Some(path) = &args.report {
        write_json(&summary, path).map_err(runtime)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct GridPoint {
    pub workers: usize,
    pub latency_seed: u64,
    pub warm: bool,
    pub run: u64,
}

impl std::fmt::Display for GridPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "workers={} latency_seed={} cache={} run={}",
            self.workers,
            self.latency_seed,
            if self.warm { "warm" } else { "cold" },
            self.run
        )
    }
}

/// Per-grid-point sequence hashes, one per epoch.
pub type HashTable = BTreeMap<GridPoint, Vec<u64>>;

/// Runs the verify grid. Cold points start from an empty cache; warm points
/// reuse the cache the preceding cold point filled.
pub fn verify_grid(
    args: &VerifyArgs,
    manifest: &Manifest,
    scratch: &Path,
) -> Result<HashTable, CliError> {
    let mut base = args.bench.clone();
    if base.transform_cost_ms.take().is_some() {
        base.spin = base.reader_config(manifest, None).transform.spin_iterations;
    }
    let mut table = HashTable::new();
    for &workers in &args.workers_grid {
        if workers == 0 {
            return Err(CliError::Usage(
                "--workers-grid entries must be >= 1".into(),
            ));
        }
        for &latency_seed in &args.latency_seeds {
            for run in 0..args.runs {
                let cache_dir = scratch.join(format!("w{workers}-s{latency_seed}-r{run}"));
                wipe(&cache_dir)?;
                for warm in [false, true] {
                    let mut bench = base.clone();
                    bench.workers = workers as u64;
                    bench.latency_seed = latency_seed;
                    let config = bench.reader_config(manifest, Some(&cache_dir));
                    let summary = run_epochs(config, manifest.clone(), bench.epochs)?;
                    let hashes = summary.epochs.iter().map(|r| r.sequence_hash).collect();
                    table.insert(
                        GridPoint {
                            workers,
                            latency_seed,
                            warm,
                            run,
                        },
                        hashes,
                    );
                }
            }
        }
    }
    Ok(table)
}

/// Grid points whose hash for some epoch differs from the most common one.
pub fn divergent_points(table: &HashTable) -> Vec<(GridPoint, u64)> {
    let epochs = table.values().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for e in 0..epochs {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for hashes in table.values() {
            *counts.entry(hashes[e]).or_default() += 1;
        }
        let majority = counts.iter().max_by_key(|(_, c)| **c).map(|(h, _)| *h);
        for (point, hashes) in table {
            if Some(hashes[e]) != majority {
                out.push((point.clone(), e as u64));
            }
        }
    }
    out
}

fn cmd_verify(args: &VerifyArgs) -> Result<(), CliError> {
    if args.workers_grid.is_empty() || args.latency_seeds.is_empty() {
        return Err(CliError::Usage("empty verify grid".into()));
    }
    let manifest = load_manifest(&args.bench.manifest).map_err(runtime)?;
    let scratch = match &args.bench.cache_dir {
        Some(parent) => {
            fs::create_dir_all(parent).map_err(runtime)?;
            tempfile::tempdir_in(parent)
        }
        None => tempfile::tempdir(),
    }
    .map_err(runtime)?;
    let table = verify_grid(args, &manifest, scratch.path())?;

    for (point, hashes) in &table {
        let cells: Vec<String> = hashes.iter().map(|h| format!("{h:016x}")).collect();
        out!("{point}: {}", cells.join(" "));
    }
    let divergent = divergent_points(&table);
    let epochs = table.values().next().map_or(0, Vec::len);
    for e in 0..epochs {
        let mut distinct: Vec<u64> = table.values().map(|h| h[e]).collect();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() == 1 {
            out!("epoch {e}: {:016x}", distinct[0]);
        } else {
            out!("epoch {e}: DIVERGED ({} distinct hashes)", distinct.len());
        }
    }
    if divergent.is_empty() {
        Ok(())
    } else {
        let lines: Vec<String> = divergent
            .iter()
            .map(|(p, e)| format!("  epoch {e}: {p}"))
            .collect();
        Err(CliError::Runtime(format!(
            "sequence hashes diverged for {} configuration(s):\n{}",
            divergent.len(),
            lines.join("\n")
        )))
    }
}

fn cmd_cache_stats(args: &CacheStatsArgs) -> Result<(), CliError> {
    let summary = scan_dir(&args.cache_dir).map_err(runtime)?;
    out!("entries {}", summary.entries);
    out!("stored_bytes {}", summary.stored_bytes);
    for s in &summary.shards {
        out!(
            "shard {}: entries {} bytes {}",
            s.shard,
            s.entries,
            s.stored_bytes
        );
    }
    Ok(())
}

pub fn execute(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Gen(a) => cmd_gen(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Verify(a) => cmd_verify(a),
        Command::CacheStats(a) => cmd_cache_stats(a),
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
