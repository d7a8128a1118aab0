
use super::{check_rho_lambda, p2ot_objective, P2otProblem};
use crate::error::{dim_err, Error, Result};
use crate::ot_core::scaling::{check_finite, exceeds, max_abs_diff};
use crate::ot_core::{CostMatrix, GaugeKernel, KlWeight, ScalingConfig, TransportPlan};

/// A P2OT plan together with what was dropped to get it.
#[derive(Debug, Clone)]
pub struct P2otSolution {
    /// The `N × K` plan, virtual column removed.
    pub plan: TransportPlan,
    /// Mass left on the virtual cluster; `1 - rho` at the optimum.
    pub virtual_mass: f64,
    /// Number of log-domain absorptions performed.
    pub absorptions: usize,
}

/// Solves P2OT on `C = -log P`.
pub fn solve_p2ot_fast(problem: &P2otProblem) -> Result<TransportPlan> {
    problem.validate()?;
    Ok(solve_p2ot_with_cost(&problem.cost()?, problem.rho, problem.lambda, &problem.cfg)?.plan)
}

/// Stabilized scaling on the virtual-cluster extension of `cost`.
///
/// Iterates `a = alpha / (M b)` and `b = w (beta / (M^T a))^f` with
/// `f = lambda / (lambda + eps)` on the real clusters and `f = 1` on the
/// virtual one. Whenever an entry of `a` or `b` exceeds the stabilization
/// threshold the vectors are absorbed into the potentials `(u, v)`, `w` picks
/// up `b^(f-1)`, and `a, b` restart from one. A final row half-step makes the
/// extended rows exact; the virtual column is then dropped without
/// renormalization. Convergence needs both a small change of `b` and a
/// closing half-step that shifts at most `tol` mass.
pub fn solve_p2ot_with_cost(
    cost: &CostMatrix,
    rho: f64,
    lambda: KlWeight,
    cfg: &ScalingConfig,
) -> Result<P2otSolution> {
    cfg.validate()?;
    check_rho_lambda(rho, lambda)?;
    let (n, k) = (cost.n_rows(), cost.n_cols());
    if n == 0 || k == 0 {
        return Err(dim_err("empty cost matrix"));
    }
    let k1 = k + 1;
    let eps = cfg.epsilon;
    let alpha = 1.0 / n as f64;
    let mut beta = vec![rho / k as f64; k];
    beta.push(1.0 - rho);
    let mut f = vec![lambda.exponent(eps); k];
    f.push(1.0);

    let mut kernel = GaugeKernel::with_zero_columns(cost.as_slice(), k, 1, eps, cfg.parallelism);
    let mut w = vec![1.0; k1];
    let mut a = vec![1.0; n];
    let mut b = vec![1.0; k1];
    let mut b_next = vec![0.0; k1];
    let mut kb = vec![0.0; n];
    let mut kta = vec![0.0; k1];
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut absorptions = 0;
    // K b is reused when the convergence check already formed it for this b
    let mut kb_fresh = false;

    let row_step = |a: &mut [f64], kb: &[f64]| {
        for (ai, &x) in a.iter_mut().zip(kb) {
            *ai = alpha / x;
        }
    };

    for it in 1..=cfg.max_iter {
        iterations = it;
        if !kb_fresh {
            kernel.mul(&b, &mut kb);
        }
        kb_fresh = false;
        row_step(&mut a, &kb);
        check_finite(it, "row scaling", &a)?;
        kernel.mul_t(&a, &mut kta);
        for j in 0..k1 {
            b_next[j] = if beta[j] == 0.0 {
                0.0
            } else if f[j] == 1.0 {
                w[j] * beta[j] / kta[j]
            } else {
                w[j] * (beta[j] / kta[j]).powf(f[j])
            };
        }
        check_finite(it, "column scaling", &b_next)?;

        let change = max_abs_diff(&b, &b_next);
        std::mem::swap(&mut b, &mut b_next);
        residuals.push(change);
        if change < cfg.tol {
            // a small change of b can hide a slow contraction: also require
            // the closing row half-step to move at most `tol` mass
            kernel.mul(&b, &mut kb);
            kb_fresh = true;
            let shift: f64 = a.iter().zip(&kb).map(|(ai, x)| (alpha - ai * x).abs()).sum();
            if shift <= cfg.tol {
                converged = true;
                break;
            }
        }
        if exceeds(cfg.stabilization_threshold, &[&a, &b]) {
            for j in 0..k1 {
                if b[j] > 0.0 {
                    w[j] *= b[j].powf(f[j] - 1.0);
                }
            }
            kernel.absorb(&mut a, &mut b);
            absorptions += 1;
            kb_fresh = false;
        }
    }

    if !kb_fresh {
        kernel.mul(&b, &mut kb);
    }
    row_step(&mut a, &kb);
    check_finite(iterations, "row scaling", &a)?;
    let coupling = kernel.coupling_cols(&a, &b, k);
    let virtual_mass = kernel.tail_mass(&a, &b, k);
    if !virtual_mass.is_finite() || coupling.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite {
            iteration: iterations,
            what: "coupling".into(),
        });
    }
    let objective = p2ot_objective(&coupling, cost.values(), rho, lambda, eps);
    if !converged {
        log::debug!("P2OT scaling stopped at max_iter={} (last change {:e})", cfg.max_iter, residuals.last().copied().unwrap_or(f64::NAN));
    }
    Ok(P2otSolution {
        plan: TransportPlan {
            coupling,
            objective,
            iterations,
            converged,
            residuals,
        },
        virtual_mass,
        absorptions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ot_core::{scaling_solve, solve_uot};
    use crate::p2ot::{extend_virtual, Feasibility};
    use ndarray::{array, Array2};

    fn pr(p: Array2<f64>, rho: f64) -> P2otProblem {
        P2otProblem::new(p, rho, KlWeight::Finite(1.0), ScalingConfig::default()).unwrap()
    }

    #[test]
    fn uniform_predictions_give_uniform_plan() {
        let cfg = ScalingConfig::default().with_tol(1e-14).with_max_iter(100_000);
        for rho in [0.1, 0.5, 1.0] {
            let p = Array2::from_elem((6, 3), 1.0 / 3.0);
            let plan = solve_p2ot_fast(&P2otProblem::new(p, rho, KlWeight::Finite(1.0), cfg).unwrap()).unwrap();
            assert!(plan.converged);
            for q in plan.coupling.iter() {
                assert!((q - rho / 18.0).abs() < 1e-12, "{rho}: {q}");
            }
        }
    }

    #[test]
    fn full_mass_matches_uot() {
        let p = array![[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.3, 0.3, 0.4], [0.8, 0.1, 0.1]];
        let fast = solve_p2ot_fast(&pr(p.clone(), 1.0)).unwrap();
        let uot = solve_uot(&p, KlWeight::Finite(1.0), &ScalingConfig::default()).unwrap();
        for (x, y) in fast.coupling.iter().zip(uot.coupling.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn single_cluster_prefers_confident_sample() {
        let p = array![[1.0], [1.0]];
        // both rows certain: mass splits evenly
        let plan = solve_p2ot_fast(&pr(p, 0.5)).unwrap();
        assert!((plan.coupling[[0, 0]] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn matches_generic_solver_on_extension() {
        let p = array![[0.5, 0.3, 0.2], [0.1, 0.2, 0.7], [0.25, 0.5, 0.25], [0.6, 0.3, 0.1], [0.05, 0.9, 0.05]];
        let problem = pr(p, 0.6);
        let ext = extend_virtual(&problem).unwrap();
        let (r, c) = ext.constraints().unwrap();
        let cfg = ScalingConfig::default().with_tol(1e-12).with_max_iter(100_000);
        let generic = scaling_solve(&ext.cost_ext, &r, &c, &cfg).unwrap();
        let fast = solve_p2ot_with_cost(&problem.cost().unwrap(), 0.6, KlWeight::Finite(1.0), &cfg).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                assert!((generic.coupling[[i, j]] - fast.plan.coupling[[i, j]]).abs() < 1e-10);
            }
        }
        assert!((fast.virtual_mass - 0.4).abs() < 1e-10);
    }

    #[test]
    fn stabilization_is_neutral_when_naive_recursion_is_finite() {
        let p = array![[0.5, 0.3, 0.2], [0.1, 0.2, 0.7], [0.25, 0.5, 0.25], [0.6, 0.3, 0.1]];
        let cost = CostMatrix::from_probabilities(&p).unwrap();
        let base = ScalingConfig::default().with_epsilon(0.05).with_tol(1e-12).with_max_iter(50_000);
        let mut low = base;
        low.stabilization_threshold = 10.0;
        let naive = solve_p2ot_with_cost(&cost, 0.3, KlWeight::Finite(1.0), &base.unstabilized()).unwrap();
        let stab = solve_p2ot_with_cost(&cost, 0.3, KlWeight::Finite(1.0), &low).unwrap();
        assert!(stab.absorptions > 0);
        assert_eq!(naive.absorptions, 0);
        for (x, y) in naive.plan.coupling.iter().zip(stab.plan.coupling.iter()) {
            assert!((x - y).abs() < 1e-8, "{x} {y}");
        }
    }

    #[test]
    fn plans_are_feasible() {
        let p = array![[0.9, 0.05, 0.05], [0.2, 0.7, 0.1], [0.3, 0.3, 0.4], [0.1, 0.1, 0.8], [0.5, 0.25, 0.25]];
        // small rho contracts slowly, hence the generous cap
        let cfg = ScalingConfig::default().with_max_iter(50_000);
        for rho in [0.1, 0.5, 0.9, 1.0] {
            let plan = solve_p2ot_fast(&P2otProblem::new(p.clone(), rho, KlWeight::Finite(1.0), cfg).unwrap()).unwrap();
            assert!(plan.converged, "{rho}");
            let f = Feasibility::of(&plan.coupling, rho);
            assert!(f.holds(1e-8, 1e-6), "{rho}: {f:?}");
        }
    }

    #[test]
    fn deterministic() {
        let p = array![[0.9, 0.1], [0.4, 0.6], [0.3, 0.7]];
        let a = solve_p2ot_fast(&pr(p.clone(), 0.4)).unwrap();
        let b = solve_p2ot_fast(&pr(p, 0.4)).unwrap();
        assert_eq!(a, b);
    }
}
