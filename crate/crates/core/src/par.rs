//! Data-parallel helpers.
//!
//! With the `parallel` feature the helpers fan work out over rayon; without
//! it (or after [`set_parallel(false)`](set_parallel)) they run the same
//! closures sequentially. Every helper partitions work into independent
//! pieces whose results are combined in index order, so both paths produce
//! bit-identical output.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static ENABLED: AtomicBool = AtomicBool::new(true);

/// Work below this many scalar operations is never split.
pub const MIN_PARALLEL_WORK: usize = 1 << 15;

/// Runtime switch; has no effect when the crate is built without `parallel`.
pub fn set_parallel(on: bool) {
    ENABLED.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && ENABLED.load(Ordering::Relaxed)
}

/// Worker threads the helpers may use.
pub fn threads() -> usize {
    #[cfg(feature = "parallel")]
    if is_parallel() {
        return rayon::current_num_threads();
    }
    1
}

/// Calls `f(chunk_index, chunk)` for consecutive `chunk_len`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk_len = chunk_len.max(1);
    #[cfg(feature = "parallel")]
    if is_parallel() && work >= MIN_PARALLEL_WORK && data.len() > chunk_len {
        data.par_chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = work;
    data.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indices<R, F>(n: usize, work: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() && work >= MIN_PARALLEL_WORK && n > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = work;
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree() {
        let run = || {
            let mut v = vec![0u64; 1 << 16];
            for_each_chunk_mut(&mut v, 1000, usize::MAX, |i, c| {
                for (j, x) in c.iter_mut().enumerate() {
                    *x = (i * 1000 + j) as u64 * 3;
                }
            });
            v
        };
        set_parallel(false);
        let a = run();
        set_parallel(true);
        let b = run();
        assert_eq!(a, b);
        assert_eq!(map_indices(5, usize::MAX, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
