//! Execution backend for the data-parallel loops.
//!
//! Every parallel loop in the crate maps an index range to independent
//! outputs, and any reduction that follows runs sequentially in index
//! order. Results are therefore bitwise identical between the two
//! backends, which the tests rely on.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of items handed to one rayon task.
#[cfg(feature = "parallel")]
const GRAIN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Rayon work stealing. Without the `parallel` feature this runs
    /// sequentially.
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
    /// `(0..n).map(f).collect()`, possibly in parallel.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if n > 1 => (0..n).into_par_iter().with_min_len(GRAIN).map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Calls `f(i, chunk_i)` for consecutive `width`-sized chunks of `data`.
    pub fn for_each_chunk<F>(self, data: &mut [f64], width: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if width == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if data.len() > width => data
                .par_chunks_mut(width)
                .with_min_len(GRAIN)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
            _ => data.chunks_mut(width).enumerate().for_each(|(i, c)| f(i, c)),
        }
    }

    /// Fallible [`Exec::map`]; the first error in index order wins.
    pub fn try_map<T, E, F>(self, n: usize, f: F) -> Result<Vec<T>, E>
    where
        T: Send,
        E: Send,
        F: Fn(usize) -> Result<T, E> + Sync + Send,
    {
        self.map(n, f).into_iter().collect()
    }
}
