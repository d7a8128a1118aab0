//! Progressive partial optimal transport.
//!
//! The selected-mass problem
//!
//! ```text
//! min <Q, C> + lambda KL(Q^T 1, rho/K 1) - eps H(Q)
//! s.t. Q 1 <= 1/N,  1^T Q 1 = rho
//! ```
//!
//! is solved by appending a zero-cost virtual cluster that absorbs the
//! unselected `1 - rho` mass under an exact column constraint. [`fast`] holds
//! the resulting stabilized scaling recursion and [`gsa`] the generalized
//! scaling baseline that handles the total mass with an extra scalar.

mod bench;
mod fast;
mod gsa;

pub use bench::{
    benchmark_p2ot, random_predictions, records_to_csv, BenchConfig, BenchRecord, BENCH_CSV_HEADER,
};
pub use fast::{solve_p2ot_fast, solve_p2ot_with_cost, P2otSolution};
pub use gsa::{solve_p2ot_gsa, solve_p2ot_gsa_with_cost};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::ot_core::{
    check_probabilities, entropic_objective, CostMatrix, KlWeight, MarginalConstraint,
    ScalingConfig,
};

#[derive(Debug, Clone)]
pub struct P2otProblem {
    pub pred: Array2<f64>,
    /// Selected mass fraction in `(0, 1]`.
    pub rho: f64,
    /// Weight of the cluster-size KL term.
    pub lambda: KlWeight,
    pub cfg: ScalingConfig,
}

impl P2otProblem {
    pub fn new(pred: Array2<f64>, rho: f64, lambda: KlWeight, cfg: ScalingConfig) -> Result<Self> {
        let p = Self {
            pred,
            rho,
            lambda,
            cfg,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_probabilities(&self.pred)?;
        check_rho_lambda(self.rho, self.lambda)?;
        self.cfg.validate()
    }

    pub fn cost(&self) -> Result<CostMatrix> {
        CostMatrix::from_probabilities(&self.pred)
    }
}

pub(crate) fn check_rho_lambda(rho: f64, lambda: KlWeight) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(arg_err(format!("rho must lie in (0, 1], got {rho}")));
    }
    if let KlWeight::Finite(l) = lambda {
        if !(l >= 0.0) || !l.is_finite() {
            return Err(arg_err(format!("lambda must be >= 0, got {l}")));
        }
    }
    Ok(())
}

/// The P2OT problem with the virtual cluster appended as column `K`.
#[derive(Debug, Clone)]
pub struct ExtendedProblem {
    /// `N × (K+1)`, last column identically zero.
    pub cost_ext: CostMatrix,
    /// `[rho/K, ..., rho/K, 1 - rho]`.
    pub beta: Vec<f64>,
    /// `[lambda, ..., lambda, inf]`.
    pub weights: Vec<KlWeight>,
    /// `1/N` per row.
    pub alpha: Vec<f64>,
}

impl ExtendedProblem {
    /// Row equality and weighted-KL column constraint, ready for
    /// [`crate::ot_core::scaling_solve`].
    pub fn constraints(&self) -> Result<(MarginalConstraint, MarginalConstraint)> {
        Ok((
            MarginalConstraint::equality(self.alpha.clone())?,
            MarginalConstraint::weighted_kl(self.weights.clone(), self.beta.clone())?,
        ))
    }
}

pub fn extend_virtual(problem: &P2otProblem) -> Result<ExtendedProblem> {
    problem.validate()?;
    Ok(extend_cost(&problem.cost()?, problem.rho, problem.lambda))
}

/// Builds the extended problem for an arbitrary cost.
pub fn extend_cost(cost: &CostMatrix, rho: f64, lambda: KlWeight) -> ExtendedProblem {
    let (n, k) = (cost.n_rows(), cost.n_cols());
    let mut beta = vec![rho / k as f64; k];
    beta.push(1.0 - rho);
    let mut weights = vec![lambda; k];
    weights.push(KlWeight::Infinite);
    ExtendedProblem {
        cost_ext: cost.with_virtual_column(),
        beta,
        weights,
        alpha: vec![1.0 / n as f64; n],
    }
}

/// `<Q, C> + lambda KL(Q^T 1, rho/K 1) - eps H(Q)`. The row cap and total
/// mass are constraints and contribute nothing; an infinite `lambda` makes
/// the column term a constraint as well.
pub fn p2ot_objective(q: &Array2<f64>, cost: &Array2<f64>, rho: f64, lambda: KlWeight, eps: f64) -> f64 {
    let (n, k) = q.dim();
    let row = MarginalConstraint::upper(vec![1.0 / n as f64; n]).expect("valid row cap");
    let col = MarginalConstraint::weighted_kl(vec![lambda; k], vec![rho / k as f64; k])
        .expect("valid column target");
    entropic_objective(q, cost, &row, &col, eps)
}

/// Objective of the extended problem `[Q, xi]` with `xi = 1/N - Q 1`: the
/// P2OT objective plus the entropy of the virtual column. This is what the
/// fast solver minimizes exactly; it differs from [`p2ot_objective`] by
/// `-eps H(xi)`, which is not constant over the feasible set when `rho < 1`.
pub fn p2ot_extended_objective(
    q: &Array2<f64>,
    cost: &Array2<f64>,
    rho: f64,
    lambda: KlWeight,
    eps: f64,
) -> f64 {
    let cap = 1.0 / q.nrows() as f64;
    let xi_term: f64 = q
        .rows()
        .into_iter()
        .map(|r| (cap - r.sum()).max(0.0))
        .filter(|&x| x > 0.0)
        .map(|x| x * x.ln())
        .sum();
    p2ot_objective(q, cost, rho, lambda, eps) + eps * xi_term
}

/// How far a plan is from the P2OT feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    /// `max_i (Q 1)_i - 1/N`; non-positive when every row cap holds.
    pub max_row_excess: f64,
    /// `|1^T Q 1 - rho|`.
    pub mass_error: f64,
    pub min_entry: f64,
}

impl Feasibility {
    pub fn of(q: &Array2<f64>, rho: f64) -> Self {
        let n = q.nrows();
        let cap = 1.0 / n as f64;
        let max_row_excess = q
            .rows()
            .into_iter()
            .map(|r| r.sum() - cap)
            .fold(f64::NEG_INFINITY, f64::max);
        Self {
            max_row_excess,
            mass_error: (q.sum() - rho).abs(),
            min_entry: q.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }

    pub fn holds(&self, row_tol: f64, mass_tol: f64) -> bool {
        self.max_row_excess <= row_tol && self.mass_error <= mass_tol && self.min_entry >= 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn problem(rho: f64) -> P2otProblem {
        let p = array![[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]];
        P2otProblem::new(p, rho, KlWeight::Finite(1.0), ScalingConfig::default()).unwrap()
    }

    #[test]
    fn extension_targets() {
        let ext = extend_virtual(&problem(0.7)).unwrap();
        let want = [0.7 / 3.0, 0.7 / 3.0, 0.7 / 3.0, 0.3];
        for (b, w) in ext.beta.iter().zip(want) {
            assert!((b - w).abs() < 1e-15);
        }
        assert!((ext.beta.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(ext.weights[3], KlWeight::Infinite);
        assert_eq!(ext.alpha, vec![0.5, 0.5]);
        assert!(ext.cost_ext.values().column(3).iter().all(|c| *c == 0.0));
    }

    #[test]
    fn full_mass_leaves_virtual_column_empty() {
        let p = array![[0.5, 0.5], [0.1, 0.9]];
        let pr = P2otProblem::new(p, 1.0, KlWeight::Finite(1.0), ScalingConfig::default()).unwrap();
        assert_eq!(extend_virtual(&pr).unwrap().beta, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn invalid_problems() {
        let p = array![[0.5, 0.5]];
        let c = ScalingConfig::default();
        assert!(P2otProblem::new(p.clone(), 0.0, KlWeight::Finite(1.0), c).is_err());
        assert!(P2otProblem::new(p.clone(), 1.1, KlWeight::Finite(1.0), c).is_err());
        assert!(P2otProblem::new(p.clone(), 0.5, KlWeight::Finite(-1.0), c).is_err());
        assert!(P2otProblem::new(array![[0.5, 0.6]], 0.5, KlWeight::Finite(1.0), c).is_err());
    }

    #[test]
    fn feasibility_report() {
        let q = array![[0.2, 0.1], [0.1, 0.05]];
        let f = Feasibility::of(&q, 0.45);
        assert!((f.max_row_excess - (-0.2)).abs() < 1e-15);
        assert!(f.mass_error < 1e-15);
        assert!(f.holds(1e-8, 1e-6));
        assert!(!Feasibility::of(&q, 0.5).holds(1e-8, 1e-6));
    }
}
