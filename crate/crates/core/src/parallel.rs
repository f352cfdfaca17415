use rayon::{ThreadPool, ThreadPoolBuilder};

pub const THREADS_ENV: &str = "SCRFORGE_THREADS";

/// Worker pool capped by `SCRFORGE_THREADS` when set to a positive integer.
pub(crate) fn worker_pool() -> ThreadPool {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("failed to build worker pool")
}
