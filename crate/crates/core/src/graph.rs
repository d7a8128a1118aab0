//! kNN semantic graphs over feature vectors.
//!
//! A dense similarity matrix is built from the features with a Gaussian or
//! cosine kernel, then every row keeps its `k` largest off-diagonal entries.
//! The result is stored as a square CSR matrix; it is not symmetrized, since
//! consumers use `A + Aᵀ`.

use std::cmp::Ordering;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::exec::{self, Parallelism};
use crate::io::Triplet;

/// Row-major sparse square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            indptr: vec![0; n + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Duplicate coordinates are summed. Within a row, entries are ordered by
    /// column.
    pub fn from_triplets(n: usize, triplets: &[Triplet]) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(i, j, v) in &sorted {
            if i >= n || j >= n {
                return Err(dim_err(format!("entry ({i}, {j}) outside a {n}x{n} matrix")));
            }
            if !v.is_finite() {
                return Err(arg_err(format!("non-finite entry at ({i}, {j})")));
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0; n + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last = None;
        for (i, j, v) in sorted {
            if last == Some((i, j)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((i, j));
            indptr[i + 1] += 1;
            indices.push(j);
            values.push(v);
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Ok(Self {
            n,
            indptr,
            indices,
            values,
        })
    }

    /// Keeps every nonzero entry of a dense square matrix.
    pub fn from_dense(m: &Array2<f64>) -> Result<Self> {
        let (r, c) = m.dim();
        if r != c {
            return Err(dim_err(format!("adjacency must be square, got {r}x{c}")));
        }
        let t: Vec<Triplet> = m
            .indexed_iter()
            .filter(|(_, v)| **v != 0.0)
            .map(|((i, j), v)| (i, j, *v))
            .collect();
        Self::from_triplets(r, &t)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored entries, including explicit zeros.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()].iter().copied().zip(self.values[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, v)| (i, j, v)))
            .collect()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.n, self.n));
        for (i, j, v) in self.triplets() {
            m[[i, j]] += v;
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<Triplet> = self.triplets().into_iter().map(|(i, j, v)| (j, i, v)).collect();
        Self::from_triplets(self.n, &t).expect("transpose keeps bounds")
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn has_zero_diagonal(&self) -> bool {
        (0..self.n).all(|i| self.get(i, i) == 0.0)
    }

    /// `A[idx, idx]`, renumbered to `0..idx.len()`. Indices may repeat.
    pub fn sub_graph(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.n) {
            return Err(dim_err(format!("index {bad} outside a graph of {} nodes", self.n)));
        }
        let mut positions: Vec<Vec<usize>> = vec![Vec::new(); self.n];
        for (p, &i) in idx.iter().enumerate() {
            positions[i].push(p);
        }
        let mut t = Vec::new();
        for (p, &i) in idx.iter().enumerate() {
            for (j, v) in self.row(i) {
                for &q in &positions[j] {
                    t.push((p, q, v));
                }
            }
        }
        Self::from_triplets(idx.len(), &t)
    }

    /// `A X` for a dense `n × m` matrix.
    pub fn mul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        let m = x.ncols();
        let mut out = vec![0.0; self.n * m];
        if m == 0 {
            return Array2::zeros((self.n, 0));
        }
        exec::for_each_row_mut(&mut out, m, Parallelism::Sequential, |i, row| {
            for (j, v) in self.row(i) {
                for (o, xj) in row.iter_mut().zip(x.row(j)) {
                    *o += v * xj;
                }
            }
        });
        Array2::from_shape_vec((self.n, m), out).expect("shape")
    }

    /// `(A + Aᵀ) X`.
    pub fn sym_mul_dense(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = self.mul_dense(x);
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                // Aᵀ contributes A_ij x_i to row j
                for c in 0..x.ncols() {
                    out[[j, c]] += v * x[[i, c]];
                }
            }
        }
        out
    }

    /// `<A, X Xᵀ> = sum_ij A_ij <x_i, x_j>`.
    pub fn quadratic_form(&self, x: &Array2<f64>) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                s += v * x.row(i).dot(&x.row(j));
            }
        }
        s
    }
}

/// Feature vectors, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    vectors: Array2<f64>,
}

impl FeatureSet {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if vectors.nrows() == 0 || vectors.ncols() == 0 {
            return Err(dim_err("feature set must be non-empty"));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(arg_err("features must be finite"));
        }
        Ok(Self { vectors })
    }

    pub fn n(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn d(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }
}

fn sq_norms(z: &Array2<f64>) -> Array1<f64> {
    z.rows().into_iter().map(|r| r.dot(&r)).collect()
}

/// Squared Euclidean distances, symmetric with an exact zero diagonal.
fn sq_distances(z: &Array2<f64>) -> Array2<f64> {
    let n = z.nrows();
    let norms = sq_norms(z);
    let gram = z.dot(&z.t());
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (norms[i] + norms[j] - 2.0 * gram[[i, j]]).max(0.0);
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// `S_ij = exp(-|z_i - z_j|^2 / (2 sigma^2))`.
pub fn gaussian_similarity(features: &FeatureSet, sigma: f64) -> Result<Array2<f64>> {
    if !(sigma > 0.0) {
        return Err(arg_err(format!("sigma must be > 0, got {sigma}")));
    }
    let two_s2 = 2.0 * sigma * sigma;
    Ok(sq_distances(features.vectors()).mapv_into(|d| (-d / two_s2).exp()))
}

/// `S_ij = <z_i, z_j> / (|z_i| |z_j|)`.
pub fn cosine_similarity(features: &FeatureSet) -> Result<Array2<f64>> {
    let z = features.vectors();
    let norms = sq_norms(z).mapv(f64::sqrt);
    if let Some(i) = norms.iter().position(|&x| x == 0.0) {
        return Err(arg_err(format!("feature vector {i} has zero norm")));
    }
    let mut s = z.dot(&z.t());
    for ((i, j), v) in s.indexed_iter_mut() {
        *v = if i == j { 1.0 } else { (*v / (norms[i] * norms[j])).clamp(-1.0, 1.0) };
    }
    Ok(s)
}

/// Median of the pairwise Euclidean distances over `i < j`; zero for a
/// single sample.
pub fn median_pairwise_distance(features: &FeatureSet) -> f64 {
    let d = sq_distances(features.vectors());
    let n = d.nrows();
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .map(|(i, j)| d[[i, j]].sqrt())
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Bandwidth of the Gaussian kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sigma {
    Value(f64),
    /// Median pairwise distance of the features.
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum KernelChoice {
    Gaussian { sigma: Sigma },
    Cosine,
}

/// The kernel a graph was actually built with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Kernel {
    Gaussian { sigma: f64 },
    Cosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph {
    pub adjacency: SparseMatrix,
    pub k: usize,
    pub kernel: Kernel,
}

fn top_k_row(row: &[f64], i: usize, k: usize) -> Vec<(usize, f64)> {
    let mut cand: Vec<(usize, f64)> = row
        .iter()
        .copied()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .collect();
    // larger similarity first, ties to the lower column
    cand.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    cand.truncate(k);
    cand.sort_by_key(|&(j, _)| j);
    cand
}

/// Keeps the `k` largest off-diagonal similarities of every row.
///
/// Ties go to the lower column index. Negative similarities that make it into
/// the top `k` are stored as explicit zeros, so each row still has exactly
/// `min(k, N-1)` stored entries while `A >= 0`.
pub fn build_knn_graph(gram: &Array2<f64>, k: usize) -> Result<SparseMatrix> {
    let (n, c) = gram.dim();
    if n != c {
        return Err(dim_err(format!("gram matrix must be square, got {n}x{c}")));
    }
    if k == 0 {
        return Err(arg_err("k must be >= 1"));
    }
    if gram.iter().any(|v| !v.is_finite()) {
        return Err(arg_err("gram matrix must be finite"));
    }
    let gram = gram.as_standard_layout();
    let rows: Vec<usize> = (0..n).collect();
    let kept = exec::map_collect(&rows, Parallelism::default(), |&i| {
        top_k_row(gram.row(i).as_slice().expect("standard layout"), i, k)
    });
    let mut indptr = Vec::with_capacity(n + 1);
    indptr.push(0);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    for row in kept {
        for (j, v) in row {
            indices.push(j);
            values.push(v.max(0.0));
        }
        indptr.push(indices.len());
    }
    Ok(SparseMatrix {
        n,
        indptr,
        indices,
        values,
    })
}

/// Similarity matrix and kNN sparsification in one step.
pub fn build_semantic_graph(features: &FeatureSet, kernel: KernelChoice, k: usize) -> Result<SemanticGraph> {
    let (gram, kernel) = match kernel {
        KernelChoice::Gaussian { sigma } => {
            let s = match sigma {
                Sigma::Value(s) => s,
                Sigma::Median => {
                    let m = median_pairwise_distance(features);
                    // all points identical: any bandwidth gives an all-ones gram
                    if m > 0.0 { m } else { 1.0 }
                }
            };
            (gaussian_similarity(features, s)?, Kernel::Gaussian { sigma: s })
        }
        KernelChoice::Cosine => (cosine_similarity(features)?, Kernel::Cosine),
    };
    Ok(SemanticGraph {
        adjacency: build_knn_graph(&gram, k)?,
        k,
        kernel,
    })
}

/// Fraction of positive adjacency entries whose endpoints share a label.
/// Returns `None` when the graph has no positive entry.
pub fn adjacency_accuracy(adjacency: &SparseMatrix, labels: &[usize]) -> Result<Option<f64>> {
    if labels.len() != adjacency.n() {
        return Err(dim_err(format!(
            "{} labels for a graph of {} nodes",
            labels.len(),
            adjacency.n()
        )));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (i, j, v) in adjacency.triplets() {
        if v > 0.0 {
            total += 1;
            hit += usize::from(labels[i] == labels[j]);
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fs(z: Array2<f64>) -> FeatureSet {
        FeatureSet::new(z).unwrap()
    }

    #[test]
    fn gaussian_values() {
        let sigma = 0.7;
        // squared distance 2 sigma^2 between the two points
        let z = array![[0.0, 0.0], [sigma * 2f64.sqrt(), 0.0], [0.0, 0.0]];
        let s = gaussian_similarity(&fs(z), sigma).unwrap();
        assert!((s[[0, 1]] - (-1.0f64).exp()).abs() < 1e-12);
        assert_eq!(s[[0, 2]], 1.0);
        assert_eq!(s[[1, 1]], 1.0);
        assert_eq!(s[[1, 0]], s[[0, 1]]);
        let wide = gaussian_similarity(&fs(array![[0.0], [5.0]]), 1e9).unwrap();
        assert!((wide[[0, 1]] - 1.0).abs() < 1e-12);
        assert!(gaussian_similarity(&fs(array![[0.0]]), 0.0).is_err());
    }

    #[test]
    fn cosine_values() {
        let s = cosine_similarity(&fs(array![[1.0, 0.0], [1.0, 1.0], [0.0, 3.0], [2.0, 0.0]])).unwrap();
        assert!((s[[0, 1]] - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(s[[0, 2]].abs() < 1e-15);
        assert!((s[[0, 3]] - 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&fs(array![[1.0, 0.0], [0.0, 0.0]])).is_err());
    }

    #[test]
    fn knn_keeps_largest_off_diagonal() {
        let s = array![[1.0, 0.8, 0.3], [0.8, 1.0, 0.5], [0.3, 0.5, 1.0]];
        let a = build_knn_graph(&s, 1).unwrap();
        assert_eq!(a.triplets(), vec![(0, 1, 0.8), (1, 0, 0.8), (2, 1, 0.5)]);
        let full = build_knn_graph(&s, 5).unwrap();
        let mut want = s.clone();
        want.diag_mut().fill(0.0);
        assert_eq!(full.to_dense(), want);
    }

    #[test]
    fn knn_ties_go_to_lower_index() {
        let s = array![[1.0, 0.5, 0.5, 0.5], [0.5, 1.0, 0.2, 0.2], [0.5, 0.2, 1.0, 0.2], [0.5, 0.2, 0.2, 1.0]];
        let a = build_knn_graph(&s, 2).unwrap();
        let r0: Vec<usize> = a.row(0).map(|(j, _)| j).collect();
        assert_eq!(r0, vec![1, 2]);
        let r3: Vec<usize> = a.row(3).map(|(j, _)| j).collect();
        assert_eq!(r3, vec![0, 1]);
    }

    #[test]
    fn negative_cosine_neighbours_are_clamped() {
        let s = array![[1.0, -0.5, -0.9], [-0.5, 1.0, 0.1], [-0.9, 0.1, 1.0]];
        let a = build_knn_graph(&s, 2).unwrap();
        assert_eq!(a.nnz(), 6);
        assert!(a.is_nonnegative());
        assert_eq!(a.get(0, 1), 0.0);
        assert_eq!(a.get(1, 2), 0.1);
    }

    #[test]
    fn sparse_products_match_dense() {
        let a = SparseMatrix::from_triplets(3, &[(0, 1, 2.0), (1, 2, 0.5), (2, 0, 1.0), (0, 1, 1.0)]).unwrap();
        let dense = a.to_dense();
        assert_eq!(dense[[0, 1]], 3.0);
        let x = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        assert_eq!(a.mul_dense(&x), dense.dot(&x));
        let sym = &dense + &dense.t();
        let got = a.sym_mul_dense(&x);
        for (g, w) in got.iter().zip(sym.dot(&x).iter()) {
            assert!((g - w).abs() < 1e-14);
        }
        let qf: f64 = (&dense * &x.dot(&x.t())).sum();
        assert!((a.quadratic_form(&x) - qf).abs() < 1e-12);
        assert_eq!(a.transpose().to_dense(), dense.t());
    }

    #[test]
    fn sub_graph_renumbers() {
        let a = SparseMatrix::from_triplets(4, &[(0, 1, 1.0), (1, 3, 2.0), (3, 1, 4.0), (2, 0, 3.0)]).unwrap();
        let s = a.sub_graph(&[3, 1]).unwrap();
        assert_eq!(s.triplets(), vec![(0, 1, 4.0), (1, 0, 2.0)]);
        assert!(a.sub_graph(&[4]).is_err());
    }

    #[test]
    fn accuracy_counts_positive_entries() {
        let a = SparseMatrix::from_triplets(4, &[(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 0, 1.0), (2, 0, 0.0)]).unwrap();
        assert_eq!(adjacency_accuracy(&a, &[0, 0, 1, 1]).unwrap(), Some(0.75));
        assert_eq!(adjacency_accuracy(&a, &[2, 2, 2, 2]).unwrap(), Some(1.0));
        assert_eq!(adjacency_accuracy(&SparseMatrix::zeros(2), &[0, 1]).unwrap(), None);
        assert!(adjacency_accuracy(&a, &[0]).is_err());
    }

    #[test]
    fn separated_clusters_give_pure_neighbours() {
        let z = array![[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [10.0, 10.0], [10.1, 10.0], [10.0, 10.1]];
        let g = build_semantic_graph(&fs(z), KernelChoice::Gaussian { sigma: Sigma::Median }, 1).unwrap();
        assert_eq!(adjacency_accuracy(&g.adjacency, &[0, 0, 0, 1, 1, 1]).unwrap(), Some(1.0));
        assert!(g.adjacency.has_zero_diagonal());
        assert!(matches!(g.kernel, Kernel::Gaussian { sigma } if sigma > 1.0));
    }

    #[test]
    fn median_distance() {
        let z = array![[0.0], [1.0], [3.0]];
        // distances 1, 3, 2
        assert_eq!(median_pairwise_distance(&fs(z)), 2.0);
    }
}
