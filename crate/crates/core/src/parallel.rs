//! Data-parallel helpers shared by the numeric kernels.
//!
//! With the `parallel` feature (default) work is split across the rayon pool;
//! without it every helper degrades to a plain sequential loop. Each output
//! chunk is always produced by the same sequential code, so results are
//! bit-identical whichever path runs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many scalar operations a kernel stays on the calling thread.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Calls `f(chunk_index, chunk)` for every `chunk_len`-sized piece of `out`.
///
/// `work` is a rough operation count used to decide whether spreading the
/// chunks over worker threads is worth it.
pub fn for_each_chunk<T, F>(out: &mut [T], chunk_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    if out.is_empty() || chunk_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if work >= MIN_PARALLEL_WORK && out.len() > chunk_len {
        out.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indices<T, F>(n: usize, work: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if work >= MIN_PARALLEL_WORK && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}

/// Runs `f` with a single worker so timings are not perturbed by scheduling.
pub fn run_single_worker<R, F>(f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new().num_threads(1).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        f()
    }
}

pub fn worker_count() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
