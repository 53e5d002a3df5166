//! Execution strategy for the data-parallel inner loops.
//!
//! With the default `parallel` feature the maps below fan out over rayon;
//! without it they run on the calling thread. Both paths return results in
//! input order and callers hand each item its own derived rng stream, so the
//! outputs are identical either way — the feature only changes wall time.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map over a range, in order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map over a slice, in order.
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Always-sequential twin of [`map_range`], kept for benchmark baselines.
pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Limit the rayon pool size (used by the CLI `--jobs` flag). A no-op when
/// the pool was already initialized or the crate was built sequential.
#[allow(unused_variables)]
pub fn configure_jobs(jobs: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let out = map_range(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let expensive = |i: usize| (0..50).fold(i as f64, |a, k| a + (k as f64).sin());
        assert_eq!(map_range(64, expensive), map_range_seq(64, expensive));
    }
}
