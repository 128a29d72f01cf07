//! Data-parallel helpers with a sequential fallback.
//!
//! Built with the `parallel` feature (default), the helpers dispatch batch
//! work onto rayon; without it they compile to plain loops. Both paths write
//! disjoint outputs in index order and perform reductions sequentially, so
//! results are bit-identical regardless of feature flags or thread count.
//!
//! [`set_sequential`] forces the sequential path at runtime even in a
//! parallel build; the criterion bench suite uses it to compare both paths in
//! one process.

#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential code path at runtime (parallel builds only).
#[cfg(feature = "parallel")]
pub fn set_sequential(seq: bool) {
    FORCE_SEQUENTIAL.store(seq, Ordering::SeqCst);
}

#[cfg(not(feature = "parallel"))]
pub fn set_sequential(_seq: bool) {}

#[cfg(feature = "parallel")]
fn parallel_enabled() -> bool {
    !FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Map `0..n` to a Vec, in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Run `f(i, chunk_i)` over consecutive `chunk`-sized slices of `data`.
/// Each index owns a disjoint slice, so the parallel and sequential paths
/// produce identical bytes.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    assert!(chunk > 0 && data.len() % chunk == 0, "uneven chunking");
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    for (i, c) in data.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Zip two equally-chunked mutable slices by index.
pub fn for_each_chunk_mut2<A, B, F>(a: &mut [A], ca: usize, b: &mut [B], cb: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync,
{
    assert!(ca > 0 && a.len() % ca == 0 && cb > 0 && b.len() % cb == 0);
    assert_eq!(a.len() / ca, b.len() / cb, "chunk count mismatch");
    #[cfg(feature = "parallel")]
    {
        if parallel_enabled() {
            use rayon::prelude::*;
            a.par_chunks_mut(ca)
                .zip(b.par_chunks_mut(cb))
                .enumerate()
                .for_each(|(i, (xa, xb))| f(i, xa, xb));
            return;
        }
    }
    for (i, (xa, xb)) in a.chunks_mut(ca).zip(b.chunks_mut(cb)).enumerate() {
        f(i, xa, xb);
    }
}
