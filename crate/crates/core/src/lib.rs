//! Deterministic row-group data loading.
//!
//! A ventilator/worker/merger pipeline reads row groups from a simulated
//! remote store, decodes them into row-major tensors, caches the results in
//! a quota-managed fanout disk cache and delivers fixed-size batches. In
//! dedicated-queue mode the delivered order depends only on the seed, epoch
//! and shard, never on worker timing.

pub mod cache;
pub mod cli;
pub mod dataset;
pub mod metrics;
pub mod pipeline;
pub mod shuffle;
pub mod store;
pub mod transform;
