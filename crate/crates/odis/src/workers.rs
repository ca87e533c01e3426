//! Worker pool for batch assembly and per-element compute.
//!
//! Results are collected in item order and reduced sequentially, so the
//! worker count never changes a single bit of output.

use rayon::prelude::*;

pub struct Workers {
    pool: rayon::ThreadPool,
    n: usize,
}

impl Workers {
    pub fn new(n: usize) -> Self {
        let n = n.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("worker pool construction");
        Workers { pool, n }
    }

    /// Honor ODIS_WORKERS, defaulting to the processor count.
    pub fn from_env() -> Self {
        let n = std::env::var("ODIS_WORKERS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or_else(|| {
                std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
            });
        Workers::new(n)
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Apply `f` to every item, preserving order in the output.
    pub fn map_ordered<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &T) -> R + Sync,
    {
        self.pool
            .install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_ordered_preserves_order_for_any_worker_count() {
        let items: Vec<u64> = (0..100).collect();
        let one = Workers::new(1).map_ordered(&items, |i, &x| (i as u64) * 1000 + x);
        let four = Workers::new(4).map_ordered(&items, |i, &x| (i as u64) * 1000 + x);
        assert_eq!(one, four);
    }
}
