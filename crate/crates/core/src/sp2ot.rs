//! Semantic-regularized P2OT.
//!
//! The objective adds `-lambda1 <A, Q Qᵀ>` to the P2OT objective. The outer
//! loop linearizes that term at the current plan, giving the cost
//! `C0 - lambda1 (A + Aᵀ) Q`, and re-solves P2OT on it. For positive
//! semidefinite `A` the semantic term is concave, so each step is a
//! majorize-minimize step and the objective cannot increase.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::graph::SparseMatrix;
use crate::ot_core::{
    check_probabilities, entropy, kl_divergence, CostMatrix, KlWeight, ScalingConfig, TransportPlan,
};
use crate::p2ot::{check_rho_lambda, solve_p2ot_with_cost};

pub const DEFAULT_OUTER_TOL: f64 = 1e-5;
pub const DEFAULT_OUTER_MAX_ITER: usize = 10;

#[derive(Debug, Clone)]
pub struct Sp2otProblem {
    pub pred: Array2<f64>,
    /// Nonnegative. Graphs from [`crate::graph`] have a zero diagonal; the
    /// solver does not need one, and a nonzero PSD matrix cannot have one.
    pub adjacency: SparseMatrix,
    pub lambda1: f64,
    pub lambda2: KlWeight,
    pub rho: f64,
    /// Inner P2OT settings; `cfg.epsilon` is the entropic weight.
    pub cfg: ScalingConfig,
    /// Relative Frobenius change of `Q` that ends the outer loop.
    pub outer_tol: f64,
    pub outer_max_iter: usize,
}

impl Sp2otProblem {
    pub fn new(
        pred: Array2<f64>,
        adjacency: SparseMatrix,
        lambda1: f64,
        lambda2: KlWeight,
        rho: f64,
        cfg: ScalingConfig,
    ) -> Result<Self> {
        let p = Self {
            pred,
            adjacency,
            lambda1,
            lambda2,
            rho,
            cfg,
            outer_tol: DEFAULT_OUTER_TOL,
            outer_max_iter: DEFAULT_OUTER_MAX_ITER,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_probabilities(&self.pred)?;
        check_rho_lambda(self.rho, self.lambda2)?;
        self.cfg.validate()?;
        check_graph(&self.adjacency, self.pred.nrows())?;
        if !(self.lambda1 >= 0.0) || !self.lambda1.is_finite() {
            return Err(arg_err(format!("lambda1 must be >= 0, got {}", self.lambda1)));
        }
        if !(self.outer_tol > 0.0) || self.outer_max_iter == 0 {
            return Err(arg_err("outer_tol must be > 0 and outer_max_iter >= 1"));
        }
        Ok(())
    }
}

fn check_graph(a: &SparseMatrix, n: usize) -> Result<()> {
    if a.n() != n {
        return Err(dim_err(format!("adjacency has {} nodes, predictions {n} rows", a.n())));
    }
    if !a.is_nonnegative() {
        return Err(arg_err("adjacency must be nonnegative"));
    }
    Ok(())
}

/// `lambda1_0 (1 - rho)`.
pub fn lambda1_decayed(lambda1_0: f64, rho: f64) -> f64 {
    lambda1_0 * (1.0 - rho)
}

/// Gradient of the smooth part `<Q, C0> - lambda1 <A, Q Qᵀ>`:
/// `C0 - lambda1 (A + Aᵀ) Q`.
pub fn sp2ot_gradient(cost0: &CostMatrix, adjacency: &SparseMatrix, lambda1: f64, plan: &Array2<f64>) -> Result<CostMatrix> {
    if plan.dim() != cost0.values().dim() || adjacency.n() != plan.nrows() {
        return Err(dim_err("cost, adjacency and plan disagree in shape"));
    }
    if lambda1 == 0.0 || adjacency.nnz() == 0 {
        return Ok(cost0.clone());
    }
    let grad = adjacency.sym_mul_dense(plan);
    CostMatrix::new(cost0.values() - &(grad * lambda1))
}

/// `<Q, -log P> - lambda1 <A, Q Qᵀ> + lambda2 KL(Qᵀ 1, rho/K) - eps H(Q)`.
/// An infinite `lambda2` drops the KL term (it is then a constraint).
pub fn sp2ot_objective(
    plan: &Array2<f64>,
    pred: &Array2<f64>,
    adjacency: &SparseMatrix,
    lambda1: f64,
    lambda2: KlWeight,
    rho: f64,
    epsilon: f64,
) -> Result<f64> {
    let cost = CostMatrix::from_probabilities(pred)?;
    if plan.dim() != pred.dim() || adjacency.n() != plan.nrows() {
        return Err(dim_err("plan, predictions and adjacency disagree in shape"));
    }
    let transport: f64 = plan.iter().zip(cost.values().iter()).map(|(q, c)| q * c).sum();
    let k = plan.ncols();
    let kl = match lambda2 {
        KlWeight::Finite(l) if l > 0.0 => {
            let cols: Vec<f64> = plan.columns().into_iter().map(|c| c.sum()).collect();
            l * kl_divergence(&cols, &vec![rho / k as f64; k])
        }
        _ => 0.0,
    };
    Ok(transport - lambda1 * adjacency.quadratic_form(plan) + kl - epsilon * entropy(plan))
}

/// Virtual-column entropy `eps sum xi log xi` with `xi = 1/N - Q 1`. Added
/// to [`sp2ot_objective`] it gives the objective the outer loop descends on.
pub fn virtual_entropy_term(plan: &Array2<f64>, epsilon: f64) -> f64 {
    let cap = 1.0 / plan.nrows() as f64;
    epsilon
        * plan
            .rows()
            .into_iter()
            .map(|r| (cap - r.sum()).max(0.0))
            .filter(|&x| x > 0.0)
            .map(|x| x * x.ln())
            .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmdStep {
    /// [`sp2ot_objective`] at the new plan.
    pub objective: f64,
    /// Objective including the virtual-column entropy.
    pub extended_objective: f64,
    pub inner_iterations: usize,
    pub inner_converged: bool,
    /// `|Q_new - Q|_F / |Q|_F`.
    pub change: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PmdTrace {
    /// Objective values at the uniform starting plan.
    pub initial_objective: f64,
    pub initial_extended_objective: f64,
    pub steps: Vec<PmdStep>,
    pub outer_converged: bool,
}

impl PmdTrace {
    pub fn objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial_objective)
            .chain(self.steps.iter().map(|s| s.objective))
            .collect()
    }

    pub fn extended_objectives(&self) -> Vec<f64> {
        std::iter::once(self.initial_extended_objective)
            .chain(self.steps.iter().map(|s| s.extended_objective))
            .collect()
    }
}

fn frobenius(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Linearize-then-project outer loop from the uniform plan `rho / (N K)`.
///
/// Stops once the relative change of `Q` falls below `outer_tol`, after
/// `outer_max_iter` steps, or after a single step when the semantic term is
/// absent. The returned plan is converged only if the outer loop and every
/// inner solve converged; its `iterations` count inner iterations in total.
pub fn solve_sp2ot(problem: &Sp2otProblem) -> Result<(TransportPlan, PmdTrace)> {
    problem.validate()?;
    let (n, k) = problem.pred.dim();
    let eps = problem.cfg.epsilon;
    let cost0 = CostMatrix::from_probabilities(&problem.pred)?;
    let objective = |q: &Array2<f64>| {
        sp2ot_objective(q, &problem.pred, &problem.adjacency, problem.lambda1, problem.lambda2, problem.rho, eps)
    };
    let linear_only = problem.lambda1 == 0.0 || problem.adjacency.nnz() == 0;

    let mut q = Array2::from_elem((n, k), problem.rho / (n * k) as f64);
    let obj0 = objective(&q)?;
    let mut trace = PmdTrace {
        initial_objective: obj0,
        initial_extended_objective: obj0 + virtual_entropy_term(&q, eps),
        ..PmdTrace::default()
    };
    let mut total_iters = 0;
    let mut inner_ok = true;
    let mut residuals = Vec::new();

    for _ in 0..problem.outer_max_iter {
        let cost = sp2ot_gradient(&cost0, &problem.adjacency, problem.lambda1, &q)?;
        let sol = solve_p2ot_with_cost(&cost, problem.rho, problem.lambda2, &problem.cfg)?;
        let next = sol.plan.coupling;
        total_iters += sol.plan.iterations;
        inner_ok &= sol.plan.converged;
        residuals = sol.plan.residuals;
        let change = frobenius(&(&next - &q)) / frobenius(&q);
        let obj = objective(&next)?;
        let step = PmdStep {
            objective: obj,
            extended_objective: obj + virtual_entropy_term(&next, eps),
            inner_iterations: sol.plan.iterations,
            inner_converged: sol.plan.converged,
            change,
        };
        if let Some(prev) = trace.steps.last() {
            if step.extended_objective > prev.extended_objective + 1e-9 {
                log::warn!(
                    "SP2OT objective increased from {} to {} (adjacency not PSD?)",
                    prev.extended_objective,
                    step.extended_objective
                );
            }
        }
        trace.steps.push(step);
        q = next;
        if linear_only || change < problem.outer_tol {
            trace.outer_converged = true;
            break;
        }
    }

    let objective = trace.steps.last().map_or(obj0, |s| s.objective);
    Ok((
        TransportPlan {
            coupling: q,
            objective,
            iterations: total_iters,
            converged: inner_ok && trace.outer_converged,
            residuals,
        },
        trace,
    ))
}
