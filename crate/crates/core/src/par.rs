//! Deterministic parallel reductions.
//!
//! Work is split into fixed-size chunks that do not depend on the number of
//! worker threads, and the per-chunk partials are folded in chunk order. The
//! result is therefore bit-identical for any rayon pool size.

use rayon::prelude::*;

pub const CHUNK: usize = 4096;

/// Maps every index range `[start, end)` of a fixed chunking of `0..len` and
/// folds the partials left to right.
pub fn chunked_reduce<A, M, F>(len: usize, init: A, map: M, fold: F) -> A
where
    A: Send,
    M: Fn(usize, usize) -> A + Sync,
    F: Fn(A, A) -> A,
{
    if len <= CHUNK {
        return fold(init, map(0, len));
    }
    let chunks = len.div_ceil(CHUNK);
    let partials: Vec<A> = (0..chunks)
        .into_par_iter()
        .map(|c| map(c * CHUNK, ((c + 1) * CHUNK).min(len)))
        .collect();
    partials.into_iter().fold(init, fold)
}
