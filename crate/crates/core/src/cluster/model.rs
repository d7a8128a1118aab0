use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, dim_err, Result};

/// Linear softmax head standing in for a network: `P = softmax(Z Wᵀ / T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeModel {
    /// `K × D`.
    pub prototypes: Array2<f64>,
    pub temperature: f64,
    pub learning_rate: f64,
}

impl PrototypeModel {
    pub fn new(prototypes: Array2<f64>, temperature: f64, learning_rate: f64) -> Result<Self> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(arg_err(format!("temperature must be > 0, got {temperature}")));
        }
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(arg_err(format!("learning rate must be > 0, got {learning_rate}")));
        }
        if prototypes.iter().any(|v| !v.is_finite()) || prototypes.nrows() == 0 {
            return Err(arg_err("prototypes must be finite and non-empty"));
        }
        Ok(Self { prototypes, temperature, learning_rate })
    }

    /// Prototypes copied from `k` distinct samples chosen by `seed`.
    pub fn from_samples(features: &Array2<f64>, k: usize, seed: u64, temperature: f64, learning_rate: f64) -> Result<Self> {
        if k == 0 || k > features.nrows() {
            return Err(arg_err(format!("cannot pick {k} prototypes from {} samples", features.nrows())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample(&mut rng, features.nrows(), k).into_vec();
        Self::new(features.select(Axis(0), &idx), temperature, learning_rate)
    }

    pub fn n_clusters(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.prototypes.ncols() {
            return Err(dim_err(format!(
                "features have {} dims, prototypes {}",
                features.ncols(),
                self.prototypes.ncols()
            )));
        }
        Ok(features.dot(&self.prototypes.t()) / self.temperature)
    }

    pub fn predict_probs(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        let mut z = self.logits(features)?;
        for mut row in z.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        Ok(z)
    }

    /// Gradient of `<Q, -log softmax(Z Wᵀ / T)>` with respect to `W`.
    pub fn cross_entropy_grad(&self, features: &Array2<f64>, probs: &Array2<f64>, q: &Array2<f64>) -> Array2<f64> {
        let mass = q.sum_axis(Axis(1)).insert_axis(Axis(1));
        let g = probs * &mass - q;
        g.t().dot(features) / self.temperature
    }

    pub fn step(&mut self, grad: &Array2<f64>) {
        self.prototypes.scaled_add(-self.learning_rate, grad);
    }
}

/// `<Q, -log P>` over the entries with `Q > 0`.
pub fn cross_entropy(q: &Array2<f64>, p: &Array2<f64>) -> f64 {
    q.iter()
        .zip(p.iter())
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| -qi * pi.max(f64::MIN_POSITIVE).ln())
        .sum()
}

/// `<Q2, -log P1> + <Q1, -log P2>`.
pub fn swapped_loss(q1: &Array2<f64>, q2: &Array2<f64>, p1: &Array2<f64>, p2: &Array2<f64>) -> Result<f64> {
    let d = q1.dim();
    if q2.dim() != d || p1.dim() != d || p2.dim() != d {
        return Err(dim_err("swapped loss inputs must share one shape"));
    }
    Ok(cross_entropy(q2, p1) + cross_entropy(q1, p2))
}
