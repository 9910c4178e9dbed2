//! Replicate-parallel execution with scheduling-independent results.
//!
//! Replicates are grouped into fixed blocks. Each block is folded
//! sequentially and block accumulators are merged in block order, so
//! floating-point sums are bit-identical for any number of workers.

use rayon::prelude::*;

pub const BLOCK: u64 = 2048;

/// Worker count from `BRWLAB_WORKERS`, or the machine's parallelism.
pub fn default_workers() -> usize {
    std::env::var("BRWLAB_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&w: &usize| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn fold_replicates<A, I, F, M>(workers: usize, replicates: u64, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, u64) + Sync,
    M: Fn(&mut A, A),
{
    let blocks = replicates.div_ceil(BLOCK);
    let run_block = |b: u64| {
        let mut acc = init();
        let end = ((b + 1) * BLOCK).min(replicates);
        for i in b * BLOCK..end {
            fold(&mut acc, i);
        }
        acc
    };
    let partials: Vec<A> = if workers <= 1 {
        (0..blocks).map(run_block).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(|| (0..blocks).into_par_iter().map(run_block).collect())
    };
    let mut total = init();
    for p in partials {
        merge(&mut total, p);
    }
    total
}

/// Ordered map over replicate indices.
pub fn map_replicates<T, F>(workers: usize, replicates: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    if workers <= 1 {
        (0..replicates).map(f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        pool.install(|| (0..replicates).into_par_iter().map(f).collect())
    }
}
