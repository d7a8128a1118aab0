use std::collections::VecDeque;

use ndarray::{concatenate, Array2, Axis};

use crate::error::{dim_err, Result};

/// FIFO of past two-view predictions, one entry per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBuffer {
    capacity: usize,
    entries: VecDeque<Entry>,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    index: usize,
    p1: Vec<f64>,
    p2: Vec<f64>,
}

/// Buffer rows followed by the current batch; row `i` of both views belongs
/// to sample `indices[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stacked {
    pub p1: Array2<f64>,
    pub p2: Array2<f64>,
    pub indices: Vec<usize>,
    /// Rows before this offset came from the buffer.
    pub batch_start: usize,
}

impl MemoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends a batch, evicting the oldest entries past capacity.
    pub fn push(&mut self, indices: &[usize], p1: &Array2<f64>, p2: &Array2<f64>) -> Result<()> {
        check_views(indices, p1, p2)?;
        for ((&index, r1), r2) in indices.iter().zip(p1.rows()).zip(p2.rows()) {
            self.entries.push_back(Entry { index, p1: r1.to_vec(), p2: r2.to_vec() });
        }
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        Ok(())
    }

    /// Stored predictions stacked on top of the batch.
    pub fn stack(&self, indices: &[usize], p1: &Array2<f64>, p2: &Array2<f64>) -> Result<Stacked> {
        check_views(indices, p1, p2)?;
        let k = p1.ncols();
        if self.entries.iter().any(|e| e.p1.len() != k) {
            return Err(dim_err("buffered predictions have a different cluster count"));
        }
        let m = self.entries.len();
        let flat = |view: fn(&Entry) -> &Vec<f64>| {
            let v: Vec<f64> = self.entries.iter().flat_map(|e| view(e).iter().copied()).collect();
            Array2::from_shape_vec((m, k), v).expect("rows have k entries")
        };
        let b1 = flat(|e| &e.p1);
        let b2 = flat(|e| &e.p2);
        let mut all: Vec<usize> = self.entries.iter().map(|e| e.index).collect();
        all.extend_from_slice(indices);
        Ok(Stacked {
            p1: concatenate![Axis(0), b1, *p1],
            p2: concatenate![Axis(0), b2, *p2],
            indices: all,
            batch_start: m,
        })
    }
}

fn check_views(indices: &[usize], p1: &Array2<f64>, p2: &Array2<f64>) -> Result<()> {
    if p1.dim() != p2.dim() || p1.nrows() != indices.len() {
        return Err(dim_err("views and indices must align row for row"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn fifo_and_alignment() {
        let mut b = MemoryBuffer::new(3);
        b.push(&[7, 8], &array![[0.1, 0.9], [0.2, 0.8]], &array![[0.3, 0.7], [0.4, 0.6]]).unwrap();
        b.push(&[9, 10], &array![[0.5, 0.5], [0.6, 0.4]], &array![[0.7, 0.3], [0.8, 0.2]]).unwrap();
        assert_eq!(b.len(), 3);
        let s = b.stack(&[1], &array![[1.0, 0.0]], &array![[0.0, 1.0]]).unwrap();
        assert_eq!(s.indices, vec![8, 9, 10, 1]);
        assert_eq!(s.batch_start, 3);
        assert_eq!(s.p1.row(0).to_vec(), vec![0.2, 0.8]);
        assert_eq!(s.p2.row(0).to_vec(), vec![0.4, 0.6]);
        assert_eq!(s.p2.row(3).to_vec(), vec![0.0, 1.0]);
        assert!(b.push(&[1, 2], &array![[1.0, 0.0]], &array![[1.0, 0.0]]).is_err());
    }

    #[test]
    fn empty_buffer_stacks_batch_only() {
        let b = MemoryBuffer::new(5);
        let s = b.stack(&[3, 4], &array![[0.5, 0.5], [0.1, 0.9]], &array![[0.2, 0.8], [0.3, 0.7]]).unwrap();
        assert_eq!((s.p1.nrows(), s.batch_start), (2, 0));
    }
}
