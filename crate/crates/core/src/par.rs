//! Data-parallel helpers.
//!
//! Every helper returns results in index order, so outputs are identical for
//! any thread count. With the `parallel` feature disabled, or the policy set
//! to [`ExecPolicy::Sequential`], everything runs on the calling thread.

use std::sync::atomic::{AtomicU8, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPolicy {
    Sequential,
    Parallel,
}

static POLICY: AtomicU8 = AtomicU8::new(1);

pub fn set_policy(policy: ExecPolicy) {
    POLICY.store(
        match policy {
            ExecPolicy::Sequential => 0,
            ExecPolicy::Parallel => 1,
        },
        Ordering::Relaxed,
    );
}

pub fn policy() -> ExecPolicy {
    if cfg!(feature = "parallel") && POLICY.load(Ordering::Relaxed) == 1 {
        ExecPolicy::Parallel
    } else {
        ExecPolicy::Sequential
    }
}

/// Configure the global worker pool. Only the first call has an effect.
pub fn init_threads(threads: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}

pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy() == ExecPolicy::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if policy() == ExecPolicy::Parallel {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Run `f(chunk_index, chunk)` over consecutive chunks of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if policy() == ExecPolicy::Parallel {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Sum in a fixed order regardless of how the terms were produced.
pub fn ordered_sum(terms: &[f64]) -> f64 {
    terms.iter().sum()
}
