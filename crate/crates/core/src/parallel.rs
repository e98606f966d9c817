//! Thread control for the numeric kernels.
//!
//! Kernels parallelize over *independent output rows* only; every reduction
//! runs sequentially inside its row. Results are therefore bit-identical for
//! any thread count. `--threads 1` is still the documented setting for
//! bit-determinism claims, and the sequential path is what you get with the
//! `parallel` feature disabled.

use std::sync::atomic::{AtomicUsize, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// 0 = library default (rayon's own pool size, or sequential without the
/// `parallel` feature). 1 = forced sequential.
static THREAD_LIMIT: AtomicUsize = AtomicUsize::new(0);

/// Rows below this much total work are not worth a fork/join.
const MIN_PAR_WORK: usize = 16_384;

/// Set the kernel thread limit. `0` restores the default. With the
/// `parallel` feature this also sizes the global rayon pool on first use;
/// once a pool exists the limit still short-circuits to sequential when 1.
pub fn set_thread_limit(n: usize) {
    THREAD_LIMIT.store(n, Ordering::Relaxed);
    #[cfg(feature = "parallel")]
    if n > 1 {
        // Ignore the error: the global pool can only be built once.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

pub fn thread_limit() -> usize {
    THREAD_LIMIT.load(Ordering::Relaxed)
}

fn parallel_active(total_work: usize) -> bool {
    if !cfg!(feature = "parallel") {
        return false;
    }
    if THREAD_LIMIT.load(Ordering::Relaxed) == 1 {
        return false;
    }
    total_work >= MIN_PAR_WORK
}

/// Run `f(row_index, row)` over `out` split into rows of `row_len`.
/// `work_per_row` is a cost hint (roughly flops per row) deciding whether
/// the parallel path is worth it.
pub fn for_each_row<T, F>(out: &mut [T], row_len: usize, work_per_row: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    let rows = out.len() / row_len;
    #[cfg(feature = "parallel")]
    if parallel_active(rows.saturating_mul(work_per_row.max(1))) {
        out.par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = work_per_row;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

/// Like [`for_each_row`] but over logical row indices without a shared
/// output buffer split (used when each row writes a disjoint region computed
/// from its index).
pub fn for_each_index<F>(rows: usize, work_per_row: usize, f: F)
where
    F: Fn(usize) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_active(rows.saturating_mul(work_per_row.max(1))) {
        (0..rows).into_par_iter().for_each(f);
        return;
    }
    let _ = work_per_row;
    for i in 0..rows {
        f(i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_visit_every_chunk_once() {
        let mut out = vec![0u32; 12];
        for_each_row(&mut out, 3, 1, |i, row| {
            for v in row.iter_mut() {
                *v = i as u32 + 1;
            }
        });
        assert_eq!(out, [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]);
    }

    #[test]
    fn sequential_limit_matches_parallel_results() {
        let gen = |limit: usize| {
            set_thread_limit(limit);
            let mut out = vec![0.0f64; 64 * 257];
            for_each_row(&mut out, 257, 100_000, |i, row| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (i * 31 + j) as f64 * 0.125;
                }
            });
            set_thread_limit(0);
            out
        };
        assert_eq!(gen(1), gen(0));
    }
}
