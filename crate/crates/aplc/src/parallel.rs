//! Runtime switch between sequential and rayon data-parallel execution.
//!
//! The worker count is a process-wide setting (default 1, i.e. fully
//! sequential). Kernels parallelize over disjoint output rows, so the
//! numerical result is bitwise identical on either path.

use std::sync::atomic::{AtomicUsize, Ordering};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Set the worker thread count. 1 selects the sequential path.
///
/// The rayon global pool is sized lazily on first parallel use; raising the
/// count after that point keeps the existing pool but still switches row
/// loops onto it.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
    #[cfg(feature = "parallel")]
    if n > 1 {
        // Ignore the error: the global pool can only be built once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Current worker thread count.
pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Apply `f(row_index, row)` to every `cols`-sized chunk of `data`.
///
/// Rows are disjoint, so the parallel path writes each output element from
/// exactly one task and matches the sequential result bit for bit.
pub(crate) fn for_each_row<T, F>(data: &mut [T], cols: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    debug_assert!(cols > 0 && data.len() % cols == 0);
    #[cfg(feature = "parallel")]
    {
        if threads() > 1 {
            use rayon::prelude::*;
            data.par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    for (i, row) in data.chunks_mut(cols).enumerate() {
        f(i, row);
    }
}

/// Map `f(i)` over `0..n` into a fresh `Vec`, in parallel when enabled.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads() > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}
