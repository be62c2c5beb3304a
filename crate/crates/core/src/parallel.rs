//! Batch-loop execution helpers.
//!
//! With the `parallel` feature (on by default) independent batch items fan
//! out across a rayon pool; without it the same loops run inline. Results
//! are collected in index order, so outputs are identical either way.

/// Map `f` over `0..n`, parallel when the feature allows it.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, parallel when the feature allows it.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(n, f)
}

/// Always-sequential variant, kept callable for benchmark comparison.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
