//! Index-keyed task execution and per-task random streams.
//!
//! Results are always collected in index order, and each task draws from its
//! own stream derived from `(seed, index)`, so the output does not depend on
//! whether tasks ran on the thread pool or one after another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream number `index` under `seed`.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Evaluates `task(0..count)` and returns the results in index order. Runs
/// on the rayon pool when `parallel` is set and the crate was built with the
/// `parallel` feature.
pub fn map_indexed<T, F>(count: usize, parallel: bool, task: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        use rayon::prelude::*;
        return (0..count).into_par_iter().map(task).collect();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = parallel;
    (0..count).map(task).collect()
}

/// Number of worker threads requested through `LOWRANK_THREADS`, if any.
pub fn requested_threads() -> Option<usize> {
    std::env::var("LOWRANK_THREADS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
}

/// Configures the global pool from `LOWRANK_THREADS`. Without the variable
/// rayon's own default (including `RAYON_NUM_THREADS`) applies.
pub fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    if let Some(n) = requested_threads() {
        // A pool that is already running keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn parallel_and_sequential_agree() {
        let task = |k: usize| {
            let mut rng = stream_rng(9, k as u64);
            (0..5).map(|_| rng.random::<u64>()).collect::<Vec<_>>()
        };
        assert_eq!(map_indexed(16, true, task), map_indexed(16, false, task));
    }

    #[test]
    fn streams_differ_by_index() {
        let a: u64 = stream_rng(1, 0).random();
        let b: u64 = stream_rng(1, 1).random();
        let c: u64 = stream_rng(1, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
