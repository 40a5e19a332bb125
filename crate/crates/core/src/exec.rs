//! Data-parallel execution helpers.
//!
//! With the default `parallel` feature the helpers fan work out over rayon;
//! without it they run plain sequential loops. Both paths traverse items in
//! the same order with the same fixed chunking, so results are bit-identical
//! regardless of feature selection or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Fixed accumulation chunk size. Keeping this constant (rather than derived
/// from the thread count) pins the floating-point reduction order.
pub const CHUNK: usize = 16;

/// Name of the active execution mode, used to label benchmark ids.
pub fn mode_name() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

/// Map `f` over `items`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map `f` over indices `0..n`, preserving order.
#[cfg(feature = "parallel")]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indices<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

/// Chunked map-reduce: `items` is split into fixed-size chunks, each chunk is
/// folded left-to-right with `fold`, and the per-chunk partials are combined
/// in chunk order with `merge`. The arithmetic order is therefore identical
/// in both execution modes.
pub fn chunked_fold<T, A, FInit, FFold, FMerge>(
    items: &[T],
    init: FInit,
    fold: FFold,
    merge: FMerge,
) -> A
where
    T: Sync,
    A: Send,
    FInit: Fn() -> A + Sync + Send,
    FFold: Fn(A, &T) -> A + Sync + Send,
    FMerge: Fn(A, A) -> A,
{
    #[cfg(feature = "parallel")]
    let partials: Vec<A> = items
        .par_chunks(CHUNK)
        .map(|chunk| chunk.iter().fold(init(), |acc, it| fold(acc, it)))
        .collect();
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<A> = items
        .chunks(CHUNK)
        .map(|chunk| chunk.iter().fold(init(), |acc, it| fold(acc, it)))
        .collect();

    let mut iter = partials.into_iter();
    match iter.next() {
        Some(first) => iter.fold(first, merge),
        None => init(),
    }
}
