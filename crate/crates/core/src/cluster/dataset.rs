use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_classes: usize,
    /// Largest over smallest class size.
    pub imbalance: f64,
    pub n_samples: usize,
    pub dim: usize,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub imbalance_ratio: f64,
}

impl SyntheticDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_counts.len()
    }
}

/// Class sizes `n_k ∝ R^(-k/(K-1))` scaled to `n`, rounded by largest
/// remainder (ties to the lower class) and lifted so every class keeps at
/// least one sample.
pub fn class_sizes(k: usize, imbalance: f64, n: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(arg_err(format!("need at least 2 classes, got {k}")));
    }
    if !(imbalance >= 1.0) || !imbalance.is_finite() {
        return Err(arg_err(format!("imbalance ratio must be >= 1, got {imbalance}")));
    }
    if n < k {
        return Err(Error::Infeasible(format!("{n} samples cannot fill {k} classes")));
    }
    let raw: Vec<f64> = (0..k).map(|c| imbalance.powf(-(c as f64) / (k - 1) as f64)).collect();
    let total: f64 = raw.iter().sum();
    let exact: Vec<f64> = raw.iter().map(|r| r / total * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        counts[c] += 1;
    }
    // every class needs a sample; take them from the largest classes
    while let Some(empty) = counts.iter().position(|&c| c == 0) {
        let donor = (0..k).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).expect("k >= 2");
        counts[donor] -= 1;
        counts[empty] += 1;
    }
    Ok(counts)
}

/// Gaussian mixture with a geometric long-tailed class profile.
pub fn generate_imbalanced_mixture(cfg: &DatasetConfig) -> Result<SyntheticDataset> {
    if cfg.dim == 0 {
        return Err(arg_err("dim must be >= 1"));
    }
    if !(cfg.separation >= 0.0) || !cfg.separation.is_finite() {
        return Err(arg_err(format!("separation must be >= 0, got {}", cfg.separation)));
    }
    let counts = class_sizes(cfg.n_classes, cfg.imbalance, cfg.n_samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut means = Array2::<f64>::zeros((cfg.n_classes, cfg.dim));
    for mut row in means.rows_mut() {
        loop {
            row.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v / norm * cfg.separation);
                break;
            }
        }
    }
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &m)| std::iter::repeat_n(c, m)).collect();
    labels.shuffle(&mut rng);
    let mut features = Array2::<f64>::zeros((cfg.n_samples, cfg.dim));
    for (mut row, &c) in features.rows_mut().into_iter().zip(&labels) {
        for (v, m) in row.iter_mut().zip(means.row(c)) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = m + noise;
        }
    }
    let max = *counts.iter().max().expect("k >= 2");
    let min = *counts.iter().min().expect("k >= 2");
    Ok(SyntheticDataset {
        features,
        labels,
        imbalance_ratio: max as f64 / min as f64,
        class_counts: counts,
    })
}
