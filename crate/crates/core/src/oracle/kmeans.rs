use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{arg_err, Result};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Array2<f64>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, row) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(x, row);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus(x: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centers = Array2::zeros((k, x.ncols()));
    centers.row_mut(0).assign(&x.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut u = rng.random::<f64>() * total;
            d2.iter()
                .position(|&d| {
                    u -= d;
                    u <= 0.0
                })
                .unwrap_or(n - 1)
        };
        centers.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, centers.row(c)));
        }
    }
    centers
}

fn lloyd(x: ArrayView2<f64>, mut centers: Array2<f64>, max_iter: usize) -> KMeansResult {
    let n = x.nrows();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let mut changed = false;
        for (i, r) in x.rows().into_iter().enumerate() {
            let (c, _) = nearest(r, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for (i, r) in x.rows().into_iter().enumerate() {
            let mut s = sums.row_mut(labels[i]);
            s += &r;
            counts[labels[i]] += 1;
        }
        for c in 0..k {
            // empty clusters keep their previous center
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    let inertia = x
        .rows()
        .into_iter()
        .zip(&labels)
        .map(|(r, &l)| sq_dist(r, centers.row(l)))
        .sum();
    KMeansResult { labels, centers, inertia, iterations }
}

/// k-means++ seeding followed by Lloyd iterations; the best of `n_init`
/// restarts by inertia is returned.
pub fn kmeans(x: ArrayView2<f64>, k: usize, n_init: usize, max_iter: usize, seed: u64) -> Result<KMeansResult> {
    if k == 0 || k > x.nrows() {
        return Err(arg_err(format!("k-means needs 1 <= k <= n, got k={k}, n={}", x.nrows())));
    }
    if n_init == 0 || max_iter == 0 {
        return Err(arg_err("n_init and max_iter must be positive"));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(arg_err("k-means input contains non-finite values"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..n_init {
        let r = lloyd(x, plus_plus(x, k, &mut rng), max_iter);
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("n_init >= 1"))
}
