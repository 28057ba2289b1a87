//! Execution policy for the data-parallel kernels.
//!
//! Every hot loop in the crate (convolution chunks, per-channel
//! normalization, sliding windows, ensemble members, surface-distance
//! queries) goes through [`Exec`]. With the `parallel` feature enabled,
//! [`Exec::Parallel`] dispatches onto the rayon pool; without it, both
//! variants run the same sequential loop. Reductions are always combined
//! in index order, so both policies produce bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Number of work items worth keeping in flight at once.
    pub fn width(self) -> usize {
        match self {
            Exec::Sequential => 1,
            #[cfg(feature = "parallel")]
            Exec::Parallel => rayon::current_num_threads().max(1),
            #[cfg(not(feature = "parallel"))]
            Exec::Parallel => 1,
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `0..n` through `f`, returning results in index order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps a slice through `f`, returning results in order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Runs `f(index, chunk)` over disjoint mutable chunks of `data`.
    pub fn for_each_chunk_mut<T, F>(self, data: &mut [T], chunk: usize, f: F)
    where
        T: Send,
        F: Fn(usize, &mut [T]) + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }

    /// Like [`Exec::for_each_chunk_mut`] over two equally chunked buffers.
    pub fn for_each_chunk_pair_mut<T, U, F>(
        self,
        a: &mut [T],
        a_chunk: usize,
        b: &mut [U],
        b_chunk: usize,
        f: F,
    ) where
        T: Send,
        U: Send,
        F: Fn(usize, &mut [T], &mut [U]) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            a.par_chunks_mut(a_chunk.max(1))
                .zip(b.par_chunks_mut(b_chunk.max(1)))
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y));
            return;
        }
        a.chunks_mut(a_chunk.max(1))
            .zip(b.chunks_mut(b_chunk.max(1)))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y));
    }
}
