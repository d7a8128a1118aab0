//! Data-parallel kernels shared by the solvers.
//!
//! Every reduction here has a fixed association order that does not depend on
//! the number of threads: row products are summed left to right inside a
//! single task, and column reductions are accumulated per block of
//! [`ROW_BLOCK`] rows and then combined in block order. The sequential and the
//! rayon paths therefore return bit-identical results.

use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per block in column reductions.
pub const ROW_BLOCK: usize = 256;

/// Below this many matrix entries the parallel path runs sequentially; the
/// arithmetic is the same either way.
const PAR_MIN_ENTRIES: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parallelism {
    Sequential,
    /// Uses rayon when the `parallel` feature is compiled in, otherwise
    /// identical to `Sequential`.
    Parallel,
}

impl Default for Parallelism {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Parallelism::Parallel
        } else {
            Parallelism::Sequential
        }
    }
}

impl Parallelism {
    #[inline]
    fn use_threads(self, work: usize) -> bool {
        self == Parallelism::Parallel && work >= PAR_MIN_ENTRIES && pool_threads() > 1
    }
}

// A single-thread pool only adds dispatch overhead.
#[cfg(feature = "parallel")]
fn pool_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn pool_threads() -> usize {
    1
}

/// `out = M x` for a row-major `rows × cols` matrix.
pub fn mat_vec(m: &[f64], cols: usize, x: &[f64], out: &mut [f64], par: Parallelism) {
    debug_assert_eq!(m.len(), out.len() * cols);
    debug_assert_eq!(x.len(), cols);
    let row_dot = |(row, o): (&[f64], &mut f64)| {
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    };
    #[cfg(feature = "parallel")]
    if par.use_threads(m.len()) {
        m.par_chunks(cols)
            .zip(out.par_iter_mut())
            .with_min_len(64)
            .for_each(row_dot);
        return;
    }
    let _ = par;
    m.chunks(cols).zip(out.iter_mut()).for_each(row_dot);
}

/// `out = Mᵀ x` for a row-major `rows × cols` matrix.
pub fn mat_t_vec(m: &[f64], cols: usize, x: &[f64], out: &mut [f64], par: Parallelism) {
    debug_assert_eq!(out.len(), cols);
    debug_assert_eq!(m.len(), x.len() * cols);
    let block_sum = |(block, xs): (&[f64], &[f64])| {
        let mut acc = vec![0.0; cols];
        for (row, &xi) in block.chunks(cols).zip(xs) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += xi * v;
            }
        }
        acc
    };
    let partials: Vec<Vec<f64>> = {
        #[cfg(feature = "parallel")]
        {
            if par.use_threads(m.len()) {
                m.par_chunks(ROW_BLOCK * cols)
                    .zip(x.par_chunks(ROW_BLOCK))
                    .map(block_sum)
                    .collect()
            } else {
                m.chunks(ROW_BLOCK * cols)
                    .zip(x.chunks(ROW_BLOCK))
                    .map(block_sum)
                    .collect()
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = par;
            m.chunks(ROW_BLOCK * cols)
                .zip(x.chunks(ROW_BLOCK))
                .map(block_sum)
                .collect()
        }
    };
    out.iter_mut().for_each(|o| *o = 0.0);
    for p in &partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
}

/// Applies `f(row_index, row)` to every row of a row-major matrix.
pub fn for_each_row_mut<F>(m: &mut [f64], cols: usize, par: Parallelism, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par.use_threads(m.len()) {
        m.par_chunks_mut(cols)
            .enumerate()
            .with_min_len(32)
            .for_each(|(i, row)| f(i, row));
        return;
    }
    let _ = par;
    m.chunks_mut(cols).enumerate().for_each(|(i, row)| f(i, row));
}

/// Maps independent work items, preserving order.
pub fn map_collect<T, R, F>(items: &[T], par: Parallelism, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if par == Parallelism::Parallel {
        return items.par_iter().map(f).collect();
    }
    let _ = par;
    items.iter().map(f).collect()
}

/// Deterministic sum with the same block structure as [`mat_t_vec`].
pub fn block_sum(values: &[f64]) -> f64 {
    values
        .chunks(ROW_BLOCK)
        .map(|c| c.iter().sum::<f64>())
        .fold(0.0, |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(rows: usize, cols: usize) -> Vec<f64> {
        (0..rows * cols)
            .map(|i| ((i * 7919) % 1013) as f64 / 97.0 - 3.0)
            .collect()
    }

    #[test]
    fn matvec_matches_naive() {
        let (r, c) = (700, 13);
        let m = sample(r, c);
        let x: Vec<f64> = (0..c).map(|j| j as f64 * 0.5 - 2.0).collect();
        let mut out = vec![0.0; r];
        mat_vec(&m, c, &x, &mut out, Parallelism::default());
        for i in 0..r {
            let naive: f64 = (0..c).map(|j| m[i * c + j] * x[j]).sum();
            assert!((naive - out[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn transposed_matvec_matches_naive() {
        let (r, c) = (1000, 7);
        let m = sample(r, c);
        let x: Vec<f64> = (0..r).map(|i| (i % 11) as f64 * 0.1).collect();
        let mut out = vec![0.0; c];
        mat_t_vec(&m, c, &x, &mut out, Parallelism::default());
        for j in 0..c {
            let naive: f64 = (0..r).map(|i| m[i * c + j] * x[i]).sum();
            assert!((naive - out[j]).abs() < 1e-8 * naive.abs().max(1.0));
        }
    }

    // Forces real threads even on a single-core machine.
    fn in_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
        rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(f)
    }

    #[test]
    fn sequential_and_parallel_are_bit_identical() {
        let (r, c) = (5000, 11);
        let m = sample(r, c);
        let xr: Vec<f64> = (0..r).map(|i| (i % 17) as f64 * 0.37).collect();
        let xc: Vec<f64> = (0..c).map(|j| j as f64 * 1.3).collect();
        let mut a = vec![0.0; c];
        let mut b = vec![0.0; c];
        mat_t_vec(&m, c, &xr, &mut a, Parallelism::Sequential);
        in_pool(|| mat_t_vec(&m, c, &xr, &mut b, Parallelism::Parallel));
        assert_eq!(a, b);
        let mut a = vec![0.0; r];
        let mut b = vec![0.0; r];
        mat_vec(&m, c, &xc, &mut a, Parallelism::Sequential);
        in_pool(|| mat_vec(&m, c, &xc, &mut b, Parallelism::Parallel));
        assert_eq!(a, b);
    }
}
