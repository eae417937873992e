//! Batch-axis parallelism.
//!
//! Work is split per batch entry and results are collected in batch order,
//! so reductions done by the caller are bit-identical for any thread count.
//! `BOXHEAD_THREADS` caps the pool size; the default is 1.

use rayon::prelude::*;
use std::sync::OnceLock;

pub const THREADS_ENV: &str = "BOXHEAD_THREADS";

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var(THREADS_ENV)
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .unwrap_or(1);
        if threads <= 1 {
            return None;
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .ok()
    })
    .as_ref()
}

/// Number of intra-op threads in use.
pub fn threads() -> usize {
    pool().map_or(1, |p| p.current_num_threads())
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool() {
        Some(p) if n > 1 => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        _ => (0..n).map(f).collect(),
    }
}
