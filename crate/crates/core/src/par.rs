//! Data-parallel map with a sequential fallback.
//!
//! Results always come back in input order, and callers reduce them
//! sequentially, so outputs are identical whichever path runs. The rayon
//! path is compiled only with the `parallel` feature.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Parallelism {
    Sequential,
    /// Rayon when the `parallel` feature is enabled, otherwise sequential.
    #[default]
    Auto,
}

impl Parallelism {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Parallelism::Auto
    }
}

/// `f(i)` for `i in 0..n`, collected in index order.
pub fn map_range<R, F>(n: usize, mode: Parallelism, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Like [`map_range`] for fallible closures; the first error in index order
/// is returned.
pub fn try_map_range<R, E, F>(n: usize, mode: Parallelism, f: F) -> Result<Vec<R>, E>
where
    R: Send,
    E: Send,
    F: Fn(usize) -> Result<R, E> + Sync + Send,
{
    map_range(n, mode, f).into_iter().collect()
}
