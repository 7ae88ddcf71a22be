//! Thin switch between rayon and sequential iteration.
//!
//! Every parallel loop in the crate goes through [`map_collect`], which
//! preserves input order, so results do not depend on the `parallel`
//! feature or on the thread count.

/// Maps `f` over `items`, returning results in input order.
#[cfg(feature = "parallel")]
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n` in order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let idx: Vec<usize> = (0..n).collect();
    map_collect(&idx, |&i| f(i))
}

/// Caps the global worker pool from `FLOWSTATE_THREADS`, if set. Safe to
/// call more than once; only the first call has an effect.
pub fn init_thread_pool_from_env() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("FLOWSTATE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
