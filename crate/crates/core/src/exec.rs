//! Data-parallel execution helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it (or after
//! [`set_sequential`]`(true)`) they are plain loops. Every helper partitions
//! work so that each output element is written by exactly one task and no
//! floating-point reduction depends on scheduling, so both modes give
//! bitwise-identical results.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution even when the `parallel` feature is compiled in.
pub fn set_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

/// Sizes the global worker pool. Must run before any parallel work; a
/// no-op without the `parallel` feature.
pub fn set_threads(n: usize) -> crate::Result<()> {
    if n == 0 {
        return Err(crate::Error::Config("thread count must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::Error::Config(format!("thread pool: {e}")))?;
    Ok(())
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.load(Ordering::Relaxed)
}

/// `(0..n).map(f).collect()`, possibly in parallel; output order is index order.
pub fn map<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel_enabled() && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Calls `f(i, chunk)` for each `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    if parallel_enabled() && data.len() > chunk_len {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Elementwise map from `src` into `dst` (same length).
pub fn zip_map<T, U, F>(dst: &mut [U], src: &[T], f: F)
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    assert_eq!(dst.len(), src.len());
    const GRAIN: usize = 1 << 14;
    for_each_chunk_mut(dst, GRAIN, |i, chunk| {
        let base = i * GRAIN;
        let len = chunk.len();
        for (d, s) in chunk.iter_mut().zip(&src[base..base + len]) {
            *d = f(s);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, &x)| x == 2 * i));
    }

    #[test]
    fn chunks_cover_everything_once() {
        let mut v = vec![0u32; 10_001];
        for_each_chunk_mut(&mut v, 97, |i, c| {
            for x in c.iter_mut() {
                *x += i as u32 + 1;
            }
        });
        assert!(v.iter().all(|&x| x >= 1));
        assert_eq!(v[0], 1);
        assert_eq!(v[10_000], (10_000 / 97) as u32 + 1);
    }
}
