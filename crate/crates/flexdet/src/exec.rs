//! Execution strategy for data-parallel inner loops.
//!
//! Batch items, sweep rows, bootstrap resamples and per-scene dataset work are
//! all independent, so they map onto rayon when the `parallel` feature is
//! enabled (the default). Compiling with `--no-default-features` removes the
//! rayon dependency entirely; `force_sequential` flips the same switch at run
//! time so benchmarks can compare both paths in one process.
//!
//! Every helper here produces results in input order, so the choice of path
//! never changes any computed value.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when the `parallel` feature is compiled in.
/// Returns the previous value.
pub fn force_sequential(on: bool) -> bool {
    FORCE_SEQUENTIAL.swap(on, Ordering::SeqCst)
}

/// True when work should run on the rayon pool.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(&f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Map `f` over a slice, collecting results in input order.
pub fn map_slice<'a, S, T, F>(items: &'a [S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&'a S) -> T + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            return items.par_iter().map(&f).collect();
        }
    }
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_preserves_order() {
        let out = map_indexed(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn sequential_override_matches_parallel() {
        let a = map_indexed(32, |i| (i as f64).sin());
        let prev = force_sequential(true);
        let b = map_indexed(32, |i| (i as f64).sin());
        force_sequential(prev);
        assert_eq!(a, b);
    }
}
