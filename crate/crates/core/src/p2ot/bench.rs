use std::time::Instant;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{solve_p2ot_gsa_with_cost, solve_p2ot_with_cost};
use crate::error::{arg_err, Result};
use crate::exec::Parallelism;
use crate::ot_core::{CostMatrix, KlWeight, ScalingConfig, TransportPlan};

pub const BENCH_CSV_HEADER: &str = "solver,N,K,rho,seed,wall_ms,iters,objective";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// `(N, K)` pairs.
    pub sizes: Vec<(usize, usize)>,
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
    pub lambda: f64,
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Timed runs per configuration; the median is reported.
    pub repeats: usize,
    /// Standard deviation of the Gaussian logits behind the predictions.
    pub logit_scale: f64,
    /// Timings are only comparable when sequential.
    pub parallelism: Parallelism,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![(4096, 100)],
            rhos: vec![0.1, 0.5, 0.9, 1.0],
            seeds: vec![0],
            lambda: 1.0,
            epsilon: 0.1,
            tol: 1e-6,
            max_iter: 1000,
            repeats: 5,
            logit_scale: 3.0,
            parallelism: Parallelism::Sequential,
        }
    }
}

impl BenchConfig {
    pub fn scaling_config(&self) -> ScalingConfig {
        ScalingConfig::default()
            .with_epsilon(self.epsilon)
            .with_tol(self.tol)
            .with_max_iter(self.max_iter)
            .with_parallelism(self.parallelism)
    }

    pub fn validate(&self) -> Result<()> {
        self.scaling_config().validate()?;
        if self.repeats == 0 {
            return Err(arg_err("repeats must be >= 1"));
        }
        if !(self.lambda >= 0.0) || !(self.logit_scale >= 0.0) {
            return Err(arg_err("lambda and logit_scale must be >= 0"));
        }
        if self.sizes.iter().any(|&(n, k)| n == 0 || k == 0) {
            return Err(arg_err("sizes must be positive"));
        }
        super::check_rho_lambda(1.0, KlWeight::Finite(self.lambda))?;
        for &rho in &self.rhos {
            super::check_rho_lambda(rho, KlWeight::Finite(self.lambda))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub solver: String,
    pub n: usize,
    pub k: usize,
    pub rho: f64,
    pub seed: u64,
    pub wall_ms: f64,
    pub iters: usize,
    pub objective: f64,
    pub converged: bool,
}

/// Row-softmax of `scale * Z` with `Z` standard normal, seeded.
pub fn random_predictions(n: usize, k: usize, seed: u64, scale: f64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Array2::from_shape_simple_fn((n, k), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn time_solver<F>(repeats: usize, mut run: F) -> Result<(f64, TransportPlan)>
where
    F: FnMut() -> Result<TransportPlan>,
{
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let t = Instant::now();
        let plan = run()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        last = Some(plan);
    }
    Ok((median(times), last.expect("repeats >= 1")))
}

/// Solves every `(size, rho, seed)` instance with both solvers under the
/// same settings. Instance generation is excluded from the timings, kernel
/// exponentiation is included.
pub fn benchmark_p2ot(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    cfg.validate()?;
    let scfg = cfg.scaling_config();
    let lambda = KlWeight::Finite(cfg.lambda);
    let mut out = Vec::new();
    for &(n, k) in &cfg.sizes {
        for &seed in &cfg.seeds {
            let pred = random_predictions(n, k, seed, cfg.logit_scale);
            let cost = CostMatrix::from_probabilities(&pred)?;
            for &rho in &cfg.rhos {
                let (fast_ms, fast) = time_solver(cfg.repeats, || {
                    solve_p2ot_with_cost(&cost, rho, lambda, &scfg).map(|s| s.plan)
                })?;
                let (gsa_ms, gsa) =
                    time_solver(cfg.repeats, || solve_p2ot_gsa_with_cost(&cost, rho, lambda, &scfg))?;
                for (solver, ms, plan) in [("fast", fast_ms, fast), ("gsa", gsa_ms, gsa)] {
                    log::info!(
                        "{solver} N={n} K={k} rho={rho} seed={seed}: {ms:.1} ms, {} iters",
                        plan.iterations
                    );
                    out.push(BenchRecord {
                        solver: solver.into(),
                        n,
                        k,
                        rho,
                        seed,
                        wall_ms: ms,
                        iters: plan.iterations,
                        objective: plan.objective,
                        converged: plan.converged,
                    });
                }
            }
        }
    }
    Ok(out)
}

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut s = String::from(BENCH_CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{:.4},{},{:.12e}\n",
            r.solver, r.n, r.k, r.rho, r.seed, r.wall_ms, r.iters, r.objective
        ));
    }
    s
}
