//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature (default) the work fans out through rayon;
//! without it the same closure runs in a plain loop. Outputs are collected
//! in index order either way, so downstream reductions are deterministic
//! and bitwise identical across both modes and any thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Sequential reference path, always available (also used by the benchmark
/// suite to compare against the parallel path).
pub fn map_indexed_seq<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync) -> Vec<U> {
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(feature = "parallel")]
pub fn map_indexed<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync) -> Vec<U> {
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync) -> Vec<U> {
    map_indexed_seq(items, f)
}

/// Fallible variant; the first error in index order wins.
pub fn try_map_indexed<T: Sync, U: Send, E: Send>(
    items: &[T],
    f: impl Fn(usize, &T) -> Result<U, E> + Sync,
) -> Result<Vec<U>, E> {
    map_indexed(items, f).into_iter().collect()
}

pub fn try_map_indexed_seq<T: Sync, U: Send, E: Send>(
    items: &[T],
    f: impl Fn(usize, &T) -> Result<U, E> + Sync,
) -> Result<Vec<U>, E> {
    map_indexed_seq(items, f).into_iter().collect()
}
