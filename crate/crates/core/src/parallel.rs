//! Data-parallel loop helpers with a sequential fallback.
//!
//! With the `parallel` feature these route through rayon; without it the
//! same loops run on one thread. Reductions are performed over fixed-width
//! chunks whose boundaries do not depend on the thread count, and chunk
//! results are merged sequentially in index order, so floating-point output
//! is bitwise identical across pool sizes and across the two builds.

use std::ops::Range;

/// Chunk width for [`fold_chunks`]. Fixed so reduction trees never depend on
/// the executing pool.
pub(crate) const CHUNK: usize = 512;

/// Maps `f` over `0..n`, preserving index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Accumulates over `0..n` chunk by chunk and merges the per-chunk states in
/// chunk order. `step` must only depend on the visited index, not on
/// visitation order across chunks.
pub(crate) fn fold_chunks<A, I, S, M>(n: usize, init: I, step: S, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    S: Fn(&mut A, usize) + Sync,
    M: Fn(A, A) -> A,
{
    let ranges: Vec<Range<usize>> = (0..n)
        .step_by(CHUNK.max(1))
        .map(|start| start..(start + CHUNK).min(n))
        .collect();
    let run = |range: Range<usize>| {
        let mut acc = init();
        for i in range {
            step(&mut acc, i);
        }
        acc
    };
    #[cfg(feature = "parallel")]
    let partials: Vec<A> = {
        use rayon::prelude::*;
        ranges.into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<A> = ranges.into_iter().map(run).collect();

    let mut out = init();
    for part in partials {
        out = merge(out, part);
    }
    out
}
