//! Fixed-size worker pools, cached per worker count.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use once_cell::sync::Lazy;
use rayon::{ThreadPool, ThreadPoolBuilder};

static POOLS: Lazy<Mutex<HashMap<usize, Arc<ThreadPool>>>> = Lazy::new(Default::default);

/// Number of hardware threads; the "max" worker count.
pub fn max_workers() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Returns the shared pool with exactly `workers` threads (0 means
/// [`max_workers`]).
pub fn worker_pool(workers: usize) -> Arc<ThreadPool> {
    let workers = if workers == 0 { max_workers() } else { workers };
    let mut pools = POOLS.lock().expect("worker pool registry poisoned");
    pools
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(
                ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .thread_name(move |i| format!("sparseconv-{workers}-{i}"))
                    .build()
                    .expect("failed to spawn worker pool"),
            )
        })
        .clone()
}

/// Runs `f` with rayon parallel iterators bound to a pool of `workers` threads.
pub fn with_workers<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> R {
    worker_pool(workers).install(f)
}
