//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch onto the rayon pool; without it,
//! or inside [`sequential`], they run as plain loops on the calling thread.
//! Results never depend on the execution mode: every helper preserves index
//! order and reductions are performed in a fixed order by the caller.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

struct Restore(bool);

impl Drop for Restore {
    fn drop(&mut self) {
        FORCE_SEQUENTIAL.with(|f| f.set(self.0));
    }
}

/// Runs `f` with every helper in this module forced onto the current thread.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let _restore = Restore(FORCE_SEQUENTIAL.with(|flag| flag.replace(true)));
    f()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(|f| f.get())
}

pub fn num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            return rayon::current_num_threads().max(1);
        }
    }
    1
}

/// Splits `items` work units into one contiguous span per worker.
pub fn span_len(items: usize) -> usize {
    items.div_ceil(num_threads()).max(1)
}

/// Calls `f(i)` for `i in 0..n`, collecting results in index order.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Calls `f(chunk_index, chunk)` for each `chunk`-sized piece of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Like [`for_each_chunk_mut`] over two buffers chunked in lockstep.
pub fn for_each_chunk_pair_mut<A, B, F>(a: &mut [A], chunk_a: usize, b: &mut [B], chunk_b: usize, f: F)
where
    A: Send,
    B: Send,
    F: Fn(usize, &mut [A], &mut [B]) + Sync + Send,
{
    let (chunk_a, chunk_b) = (chunk_a.max(1), chunk_b.max(1));
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            a.par_chunks_mut(chunk_a)
                .zip(b.par_chunks_mut(chunk_b))
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y));
            return;
        }
    }
    a.chunks_mut(chunk_a)
        .zip(b.chunks_mut(chunk_b))
        .enumerate()
        .for_each(|(i, (x, y))| f(i, x, y));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let a = map(100, |i| i * i);
        let b = sequential(|| map(100, |i| i * i));
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
    }

    #[test]
    fn sequential_scope_restores_flag() {
        sequential(|| assert!(!is_parallel()));
        assert_eq!(is_parallel(), cfg!(feature = "parallel"));
    }

    #[test]
    fn chunk_pairs_line_up() {
        let mut a = vec![0usize; 10];
        let mut b = vec![0usize; 20];
        for_each_chunk_pair_mut(&mut a, 2, &mut b, 4, |i, x, y| {
            x.iter_mut().for_each(|v| *v = i);
            y.iter_mut().for_each(|v| *v = i);
        });
        assert_eq!(a[9], 4);
        assert_eq!(b[19], 4);
    }
}
