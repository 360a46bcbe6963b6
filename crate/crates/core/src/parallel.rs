//! Order-preserving data-parallel map.
//!
//! With the `parallel` feature (default) work is spread over a dedicated
//! rayon pool of the requested size. Without it, or with one worker, the map
//! runs on the calling thread. Both paths return results in input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub struct WorkerPool {
    workers: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl WorkerPool {
    /// `workers == 0` means one worker per available core.
    pub fn new(workers: usize) -> Self {
        let workers = if workers == 0 {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        } else {
            workers
        };
        #[cfg(feature = "parallel")]
        {
            let pool = (workers > 1).then(|| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("failed to start worker threads")
            });
            WorkerPool { workers, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            WorkerPool { workers }
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn map<T, U, F>(&self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }

    /// Folds each item into a per-thread accumulator, then merges them.
    /// `merge` must be associative and commutative for the result to be
    /// independent of the worker count.
    pub fn fold<T, A, Init, Fold, Merge>(&self, items: &[T], init: Init, fold: Fold, merge: Merge) -> A
    where
        T: Sync,
        A: Send,
        Init: Fn() -> A + Sync + Send,
        Fold: Fn(A, &T) -> A + Sync + Send,
        Merge: Fn(A, A) -> A + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.install(|| items.par_iter().fold(&init, &fold).reduce(&init, &merge));
        }
        let _ = &merge;
        items.iter().fold(init(), fold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let items: Vec<u64> = (0..10_000).collect();
        for workers in [1, 3, 8] {
            let pool = WorkerPool::new(workers);
            assert_eq!(pool.map(&items, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
            assert_eq!(pool.fold(&items, || 0u64, |a, x| a + x, |a, b| a + b), 49_995_000);
        }
    }

    #[test]
    fn zero_means_all_cores() {
        assert!(WorkerPool::new(0).workers() >= 1);
    }
}
