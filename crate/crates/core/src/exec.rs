//! Index-parallel execution helpers.
//!
//! Every call site maps a pure function over `0..n` and collects results in
//! index order, so the output is identical whether the work ran on one thread
//! or many. Cross-entry reductions are always performed sequentially on the
//! collected vector.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this size the dispatch overhead dwarfs the work; run inline.
const PARALLEL_THRESHOLD: usize = 32;

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n < PARALLEL_THRESHOLD {
        return map_indexed_seq(n, f);
    }
    (0..n).into_par_iter().map(f).collect()
}

/// Maps `f` over `0..n` on the current thread (sequential fallback build).
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Sequential reference path. Always available; the bench suite compares it
/// against [`map_indexed`] on the same workloads.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
