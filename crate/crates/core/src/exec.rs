//! Batch-level execution strategy.
//!
//! Kernels split work by sample. Every reduction across samples is done
//! afterwards in sample order, so both strategies give bit-identical results.

/// How per-sample kernel work is scheduled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Exec {
    Sequential,
    /// Rayon work-stealing over samples. Without the `parallel` feature this
    /// behaves exactly like `Sequential`.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Calls `f(i)` for `i in 0..n` and collects the results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if n > 1 => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Runs `f(i, chunk)` over consecutive `chunk_len`-sized pieces of `data`.
    pub fn for_each_chunk<F>(self, data: &mut [f64], chunk_len: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if chunk_len == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if data.len() > chunk_len => {
                use rayon::prelude::*;
                data.par_chunks_mut(chunk_len)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c));
            }
            _ => data
                .chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
        }
    }
}
