use ndarray::Array2;

use super::{check_rho_lambda, p2ot_objective, P2otProblem};
use crate::error::{dim_err, Error, Result};
use crate::exec;
use crate::ot_core::scaling::{check_finite, max_abs_diff};
use crate::ot_core::{CostMatrix, KlWeight, ScalingConfig, TransportPlan, KERNEL_FLOOR};

/// Generalized scaling baseline on `C = -log P`.
pub fn solve_p2ot_gsa(problem: &P2otProblem) -> Result<TransportPlan> {
    problem.validate()?;
    solve_p2ot_gsa_with_cost(&problem.cost()?, problem.rho, problem.lambda, &problem.cfg)
}

/// Generalized scaling with the total mass handled by a scalar `s`:
///
/// ```text
/// a = min(alpha / (s M b), 1)
/// b = (beta / (s M^T a))^f
/// s = rho / (a^T M b)
/// ```
///
/// The product `M b` used for `s` is kept for the next row update, so each
/// iteration costs two matrix-vector products like the fast solver. There is
/// no log-domain stabilization; `stabilization_threshold` is ignored.
pub fn solve_p2ot_gsa_with_cost(
    cost: &CostMatrix,
    rho: f64,
    lambda: KlWeight,
    cfg: &ScalingConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    check_rho_lambda(rho, lambda)?;
    let (n, k) = (cost.n_rows(), cost.n_cols());
    if n == 0 || k == 0 {
        return Err(dim_err("empty cost matrix"));
    }
    let eps = cfg.epsilon;
    let par = cfg.parallelism;
    let alpha = 1.0 / n as f64;
    let beta = rho / k as f64;
    let f = lambda.exponent(eps);

    let mut m = cost.as_slice().to_vec();
    exec::for_each_row_mut(&mut m, k, par, |_, row| {
        for x in row.iter_mut() {
            *x = (-*x / eps).exp().max(KERNEL_FLOOR);
        }
    });

    let mut a = vec![0.0; n];
    let mut b = vec![1.0; k];
    let mut b_next = vec![0.0; k];
    let mut mb = vec![0.0; n];
    let mut mta = vec![0.0; k];
    let mut s = 1.0;
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    let row_step = |a: &mut [f64], mb: &[f64], s: f64| {
        for (ai, &x) in a.iter_mut().zip(mb) {
            *ai = (alpha / (s * x)).min(1.0);
        }
    };
    let dot = |x: &[f64], y: &[f64]| exec::block_sum(&x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>());

    exec::mat_vec(&m, k, &b, &mut mb, par);
    for it in 1..=cfg.max_iter {
        iterations = it;
        row_step(&mut a, &mb, s);
        check_finite(it, "row scaling", &a)?;
        exec::mat_t_vec(&m, k, &a, &mut mta, par);
        for j in 0..k {
            let r = beta / (s * mta[j]);
            b_next[j] = if f == 1.0 { r } else { r.powf(f) };
        }
        check_finite(it, "column scaling", &b_next)?;
        exec::mat_vec(&m, k, &b_next, &mut mb, par);
        s = rho / dot(&a, &mb);
        if !s.is_finite() {
            return Err(Error::NonFinite {
                iteration: it,
                what: "mass scalar".into(),
            });
        }

        let change = max_abs_diff(&b, &b_next);
        std::mem::swap(&mut b, &mut b_next);
        residuals.push(change);
        if change < cfg.tol {
            converged = true;
            break;
        }
    }

    // Final row step, then rescale so the total mass is exact.
    row_step(&mut a, &mb, s);
    let s = rho / dot(&a, &mb);
    let mut q = m;
    exec::for_each_row_mut(&mut q, k, par, |i, row| {
        for (x, bj) in row.iter_mut().zip(&b) {
            *x *= s * a[i] * bj;
        }
    });
    let coupling = Array2::from_shape_vec((n, k), q).expect("shape");
    if coupling.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite {
            iteration: iterations,
            what: "coupling".into(),
        });
    }
    let objective = p2ot_objective(&coupling, cost.values(), rho, lambda, eps);
    Ok(TransportPlan {
        coupling,
        objective,
        iterations,
        converged,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::p2ot::{p2ot_extended_objective, solve_p2ot_fast, Feasibility};
    use ndarray::array;

    fn pr(p: Array2<f64>, rho: f64) -> P2otProblem {
        let cfg = ScalingConfig::default().with_tol(1e-10).with_max_iter(100_000);
        P2otProblem::new(p, rho, KlWeight::Finite(1.0), cfg).unwrap()
    }

    #[test]
    fn uniform_full_mass() {
        let plan = solve_p2ot_gsa(&pr(Array2::from_elem((4, 2), 0.5), 1.0)).unwrap();
        for q in plan.coupling.iter() {
            assert!((q - 0.125).abs() < 1e-9);
        }
    }

    #[test]
    fn agrees_with_fast_solver_at_full_mass() {
        let p = array![[0.5, 0.3, 0.2], [0.1, 0.2, 0.7], [0.25, 0.5, 0.25], [0.6, 0.3, 0.1], [0.05, 0.9, 0.05]];
        let problem = pr(p, 1.0);
        let g = solve_p2ot_gsa(&problem).unwrap();
        let f = solve_p2ot_fast(&problem).unwrap();
        assert!(g.converged && f.converged);
        assert!((g.objective - f.objective).abs() <= 1e-8 * f.objective.abs());
        for (x, y) in g.coupling.iter().zip(f.coupling.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn partial_mass_solvers_optimize_different_entropies() {
        // GSA minimizes the objective on Q alone, the virtual-column solver
        // also charges entropy to the unselected mass. Each wins on its own.
        let p = array![[0.5, 0.3, 0.2], [0.1, 0.2, 0.7], [0.25, 0.5, 0.25], [0.6, 0.3, 0.1], [0.05, 0.9, 0.05]];
        for rho in [0.2, 0.6] {
            let problem = pr(p.clone(), rho);
            let cost = problem.cost().unwrap();
            let g = solve_p2ot_gsa(&problem).unwrap();
            let f = solve_p2ot_fast(&problem).unwrap();
            assert!(g.converged && f.converged);
            let l = KlWeight::Finite(1.0);
            assert!(g.objective < f.objective, "{rho}");
            let ext = |q| p2ot_extended_objective(q, cost.values(), rho, l, 0.1);
            assert!(ext(&f.coupling) < ext(&g.coupling), "{rho}");
        }
    }

    #[test]
    fn mass_is_exact() {
        let p = array![[0.9, 0.1], [0.4, 0.6], [0.3, 0.7]];
        let plan = solve_p2ot_gsa(&pr(p, 0.3)).unwrap();
        let f = Feasibility::of(&plan.coupling, 0.3);
        assert!(f.mass_error < 1e-14);
        assert!(f.max_row_excess < 1e-8);
    }
}
