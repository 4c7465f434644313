//! Execution helpers for data-parallel kernels.
//!
//! Every kernel in this crate parallelizes by handing each worker a disjoint
//! output slice; no two threads ever write the same element and every element
//! is reduced by a fixed sequential loop. Results are therefore bit-identical
//! between the parallel and sequential paths and across thread counts.
//!
//! The `parallel` feature selects the rayon path. `force_sequential` lets
//! benchmarks (and debugging sessions) pin the sequential path at runtime in
//! a build that has the feature enabled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential path even when the `parallel` feature is enabled.
pub fn force_sequential(enabled: bool) {
    FORCE_SEQUENTIAL.store(enabled, Ordering::SeqCst);
}

/// True when the sequential path is pinned.
pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Whether the next kernel invocation will run in parallel.
pub fn parallel_active() -> bool {
    cfg!(feature = "parallel") && !sequential_forced()
}

/// Apply `f` to each consecutive `chunk_len` slice of `out`.
///
/// `f(i, chunk)` receives the chunk index and a mutable view of that chunk.
/// Chunks are disjoint, so the parallel and sequential paths produce
/// identical bytes.
pub fn for_each_chunk<F>(out: &mut [f64], chunk_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    assert!(chunk_len > 0, "chunk_len must be positive");
    #[cfg(feature = "parallel")]
    {
        if !sequential_forced() {
            out.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    for (i, chunk) in out.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Fill a freshly allocated buffer of `chunks * chunk_len` elements chunk by chunk.
pub fn build_chunks<F>(chunks: usize, chunk_len: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let mut out = vec![0.0; chunks * chunk_len];
    for_each_chunk(&mut out, chunk_len, f);
    out
}

/// Deterministic sum: per-chunk partials in parallel, combined sequentially
/// in chunk order.
pub fn chunked_sum<F>(chunks: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    if chunks == 0 {
        return 0.0;
    }
    let partials = build_chunks(chunks, 1, |i, slot| slot[0] = f(i));
    partials.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_writes_match_sequential() {
        let mut a = vec![0.0; 12];
        for_each_chunk(&mut a, 3, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 10 + j) as f64;
            }
        });
        force_sequential(true);
        let mut b = vec![0.0; 12];
        for_each_chunk(&mut b, 3, |i, c| {
            for (j, v) in c.iter_mut().enumerate() {
                *v = (i * 10 + j) as f64;
            }
        });
        force_sequential(false);
        assert_eq!(a, b);
    }

    #[test]
    fn chunked_sum_is_order_stable() {
        let s1 = chunked_sum(100, |i| (i as f64) * 0.1);
        let s2 = chunked_sum(100, |i| (i as f64) * 0.1);
        assert_eq!(s1.to_bits(), s2.to_bits());
    }
}
