//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (on by default) [`map_items`] fans out over
//! rayon's thread pool; without it the same call is a plain sequential map.
//! Closures used here must be pure given their inputs (all randomness comes
//! from per-item derived seeds), so the output vector is identical in both
//! modes and under any thread count. [`map_items_seq`] is always sequential
//! and exists so benchmarks can compare the two paths directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[cfg(feature = "parallel")]
pub fn map_items<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_items<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential reference path, independent of the feature flag.
pub fn map_items_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Pin the global worker pool to `n` threads. Effective once per process
/// and only before the pool's first use; later calls report an error.
/// Without the `parallel` feature everything is sequential already, so
/// any request is accepted.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> Result<(), String> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) -> Result<(), String> {
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let items: Vec<u64> = (0..100).collect();
        let f = |x: &u64| x.wrapping_mul(0x9E37_79B9).rotate_left(13);
        assert_eq!(map_items(&items, f), map_items_seq(&items, f));
    }
}
