//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (on by default) per-item closures run on the
//! rayon pool; without it everything runs on the calling thread. Items are
//! always pure and results are placed by index, and every cross-item
//! reduction in this crate folds a pre-computed `Vec` in index order, so the
//! two builds produce bit-identical numbers.

/// Below this much estimated work (items × flops per item) the parallel
/// build stays sequential; rayon overhead dominates on desk-scale batches.
pub(crate) const PAR_MIN_WORK: usize = 1 << 14;

#[cfg(feature = "parallel")]
pub(crate) fn map_indexed<T, F>(n: usize, work_per_item: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if n > 1 && n.saturating_mul(work_per_item) >= PAR_MIN_WORK {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_indexed<T, F>(n: usize, _work_per_item: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Applies `f(chunk_index, chunk)` to disjoint `chunk_len`-sized pieces of
/// `data`. `data.len()` must be a multiple of `chunk_len`.
#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, work_per_chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    use rayon::prelude::*;
    let n = data.len() / chunk_len.max(1);
    if n > 1 && n.saturating_mul(work_per_chunk) >= PAR_MIN_WORK {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in data.chunks_mut(chunk_len).enumerate() {
            f(i, c);
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk_mut<F>(
    data: &mut [f64],
    chunk_len: usize,
    _work_per_chunk: usize,
    f: F,
) where
    F: Fn(usize, &mut [f64]),
{
    for (i, c) in data.chunks_mut(chunk_len).enumerate() {
        f(i, c);
    }
}
