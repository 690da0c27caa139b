use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rgload::cache::CacheConfig;
use rgload::dataset::{generate_dataset, Manifest};
use rgload::pipeline::{Mode, PipelineError, Reader, ReaderConfig, TransformSite};
use rgload::shuffle::{epoch_order, shard_slice};
use rgload::store::{LatencyModel, StoreError, StorePolicy};
use rgload::transform::TransformSpec;
use tempfile::TempDir;

fn dataset(groups: u64, rows: u32, cols: u32) -> (TempDir, Manifest) {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(groups, rows, cols, dir.path()).unwrap();
    (dir, m)
}

fn latency(base_ms: u64, jitter_ms: u64, latency_seed: u64) -> LatencyModel {
    LatencyModel {
        base_ms,
        jitter_ms,
        latency_seed,
        hang_groups: BTreeSet::new(),
    }
}

fn config(mode: Mode, workers: usize) -> ReaderConfig {
    ReaderConfig {
        mode,
        num_workers: workers,
        base_seed: 42,
        batch_size: 16,
        latency: latency(0, 3, 1),
        ..ReaderConfig::default()
    }
}

fn cache_in(dir: &TempDir, quota_bytes: u64) -> Option<CacheConfig> {
    Some(CacheConfig {
        root_dir: dir.path().join("cache"),
        num_shards: 8,
        quota_bytes,
    })
}

#[test]
fn single_worker_delivers_the_shard_slice() {
    let (_d, m) = dataset(4, 3, 2);
    let reader = Reader::new(config(Mode::Dedicated, 1), m).unwrap();
    let out = reader.run_epoch(0).unwrap();
    assert_eq!(out.delivered, shard_slice(&epoch_order(4, 42, 0), 0, 1));
}

#[test]
fn dedicated_order_is_independent_of_worker_count() {
    let (_d, m) = dataset(8, 3, 2);
    let expected = epoch_order(8, 42, 0);
    for w in [1, 2, 4] {
        let out = Reader::new(config(Mode::Dedicated, w), m.clone())
            .unwrap()
            .run_epoch(0)
            .unwrap();
        assert_eq!(out.delivered, expected, "workers={w}");
    }
}

#[test]
fn distributed_shard_is_strided_slice() {
    let (_d, m) = dataset(10, 2, 2);
    for shard in 0..3 {
        let cfg = ReaderConfig {
            shard_id: shard,
            num_shards_distributed: 3,
            ..config(Mode::Dedicated, 2)
        };
        let out = Reader::new(cfg, m.clone()).unwrap().run_epoch(1).unwrap();
        assert_eq!(
            out.delivered,
            shard_slice(&epoch_order(10, 42, 1), shard, 3)
        );
    }
}

#[test]
fn shared_mode_order_varies_with_timing() {
    let (_d, m) = dataset(8, 2, 2);
    let run = |latency_seed: u64| {
        let cfg = ReaderConfig {
            latency: latency(0, 50, latency_seed),
            ..config(Mode::Shared, 4)
        };
        let out = Reader::new(cfg, m.clone()).unwrap().run_epoch(0).unwrap();
        let mut sorted = out.delivered.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        out.delivered
    };
    let differing = (0..20).filter(|i| run(2 * i) != run(2 * i + 1)).count();
    assert!(differing >= 18, "only {differing} of 20 pairs differed");
}

#[test]
fn sequence_hash_is_invariant_across_configurations() {
    let (d, m) = dataset(16, 4, 3);
    let mut hashes = BTreeSet::new();
    for w in [1, 2, 4, 8] {
        for seed in [7, 11, 13] {
            let cfg = ReaderConfig {
                latency: latency(0, 4, seed),
                cache: cache_in(&d, u64::MAX),
                ..config(Mode::Dedicated, w)
            };
            let _ = std::fs::remove_dir_all(d.path().join("cache"));
            let reader = Reader::new(cfg, m.clone()).unwrap();
            let cold = reader.run_epoch(0).unwrap().report.sequence_hash;
            let warm = reader.run_epoch(0).unwrap();
            assert_eq!(warm.report.cache.hits, 16);
            hashes.insert(cold);
            hashes.insert(warm.report.sequence_hash);
        }
    }
    for (cap, site) in [(1, TransformSite::Consumer), (16, TransformSite::Worker)] {
        let cfg = ReaderConfig {
            queue_capacity: cap,
            transform_site: site,
            ..config(Mode::Dedicated, 3)
        };
        hashes.insert(
            Reader::new(cfg, m.clone())
                .unwrap()
                .run_epoch(0)
                .unwrap()
                .report
                .sequence_hash,
        );
    }
    assert_eq!(hashes.len(), 1, "{hashes:x?}");
}

fn oracle_value(g: u64, r: u64, c: u64, t: &TransformSpec) -> f32 {
    let mut x = ((g * 1_000_003 + r * 10_007 + c * 101) % 65_536) as f32 / 256.0;
    if t.scale == 1.0 && t.offset == 0.0 {
        return x;
    }
    for _ in 0..=t.spin_iterations {
        x = t.scale * x + t.offset;
    }
    x
}

fn content_mismatches(cfg: ReaderConfig, m: &Manifest, epochs: u64) -> usize {
    let transform = cfg.transform;
    let cols = m.schema.num_cols as usize;
    let reader = Reader::new(cfg, m.clone()).unwrap();
    let mut mismatches = 0;
    for epoch in 0..epochs {
        reader
            .run_epoch_with(epoch, |batch| {
                let mut row = 0usize;
                for p in &batch.provenance {
                    for r in p.rows.clone() {
                        for c in 0..cols {
                            let got = batch.rows[row * cols + c];
                            let want = oracle_value(p.group_id, r as u64, c as u64, &transform);
                            if got.to_bits() != want.to_bits() {
                                mismatches += 1;
                            }
                        }
                        row += 1;
                    }
                }
                assert_eq!(row, batch.num_rows());
            })
            .unwrap();
    }
    mismatches
}

#[test]
fn delivered_values_match_independent_oracle() {
    let (d, m) = dataset(12, 7, 3);
    let transform = TransformSpec {
        scale: 0.5,
        offset: 1.25,
        spin_iterations: 2,
    };
    for (mode, site) in [
        (Mode::Dedicated, TransformSite::Worker),
        (Mode::Dedicated, TransformSite::Consumer),
        (Mode::Shared, TransformSite::Worker),
    ] {
        let _ = std::fs::remove_dir_all(d.path().join("cache"));
        let cfg = ReaderConfig {
            transform_site: site,
            transform,
            batch_size: 5,
            cache: cache_in(&d, u64::MAX),
            ..config(mode, 3)
        };
        assert_eq!(content_mismatches(cfg, &m, 2), 0, "{mode} {site}");
    }
    let identity = ReaderConfig {
        batch_size: 4,
        ..config(Mode::Dedicated, 2)
    };
    assert_eq!(content_mismatches(identity, &m, 1), 0);
}

#[test]
fn hang_group_terminates_with_named_error() {
    let (_d, m) = dataset(6, 2, 2);
    let cfg = ReaderConfig {
        latency: LatencyModel {
            hang_groups: [3].into_iter().collect(),
            ..latency(0, 2, 1)
        },
        store_policy: StorePolicy {
            timeout_ms: 50,
            max_attempts: 2,
        },
        ..config(Mode::Dedicated, 2)
    };
    let reader = Reader::new(cfg, m).unwrap();
    let t = Instant::now();
    let err = reader.run_epoch(0).unwrap_err();
    assert!(t.elapsed() < Duration::from_secs(5));
    match &err {
        PipelineError::Fetch {
            source: StoreError::Timeout { group_id, attempts },
            ..
        } => assert_eq!((*group_id, *attempts), (3, 2)),
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains('3'));
    assert_eq!(reader.live_contexts(), 0);
}

#[test]
fn report_accounting() {
    let (d, m) = dataset(16, 8, 4);
    for (mode, w) in [(Mode::Dedicated, 4), (Mode::Shared, 3)] {
        let _ = std::fs::remove_dir_all(d.path().join("cache"));
        let cfg = ReaderConfig {
            latency: latency(5, 5, 3),
            cache: cache_in(&d, u64::MAX),
            ..config(mode, w)
        };
        let reader = Reader::new(cfg, m.clone()).unwrap();
        let cold = reader.run_epoch(0).unwrap().report;
        let warm = reader.run_epoch(1).unwrap().report;
        for r in [&cold, &warm] {
            assert_eq!(r.sentinels, w as u64);
            assert_eq!(r.groups_delivered, 16);
            assert_eq!(r.rows_delivered, 128);
            assert_eq!(r.batches, 8);
            let s = &r.stage_totals;
            let cap = r.wall_ms * w as f64;
            for (name, v) in [
                ("fetch", s.fetch_ms),
                ("decode", s.decode_ms),
                ("transform", s.transform_ms),
                ("cache", s.cache_ms),
            ] {
                assert!(v >= 0.0 && v <= cap, "{name} {v} > {cap}");
            }
            assert!(r.peak_queue_items >= 1);
        }
        assert_eq!(cold.cache.misses, 16);
        assert_eq!(warm.cache.hits, 16);
        assert!(warm.stage_totals.fetch_ms < cold.stage_totals.fetch_ms);
        assert_eq!(reader.live_contexts(), 0);
    }
}

#[test]
fn consumer_and_worker_sites_agree() {
    let (_d, m) = dataset(9, 5, 2);
    let collect = |site| {
        let cfg = ReaderConfig {
            transform_site: site,
            transform: TransformSpec {
                scale: 2.0,
                offset: -1.0,
                spin_iterations: 1,
            },
            batch_size: 4,
            ..config(Mode::Dedicated, 3)
        };
        let mut seen = Vec::new();
        Reader::new(cfg, m.clone())
            .unwrap()
            .run_epoch_with(2, |b| seen.push(b.clone()))
            .unwrap();
        seen
    };
    assert_eq!(
        collect(TransformSite::Worker),
        collect(TransformSite::Consumer)
    );
}

#[test]
fn zero_quota_cache_never_hits() {
    let (d, m) = dataset(6, 2, 2);
    let cfg = ReaderConfig {
        cache: cache_in(&d, 0),
        ..config(Mode::Dedicated, 2)
    };
    let reader = Reader::new(cfg, m).unwrap();
    for e in 0..2 {
        let r = reader.run_epoch(e).unwrap().report;
        assert_eq!(
            (r.cache.hits, r.cache.misses, r.cache.stored_bytes),
            (0, 6, 0)
        );
        assert_eq!(r.cache.rejected_writes, 6);
    }
}
