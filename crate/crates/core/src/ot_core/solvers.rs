//! Pseudo-label formulations built on [`scaling_solve`], all with cost
//! `C = -log P` and per-sample mass `1/N`.

use ndarray::{s, Array2};

use super::{
    check_probabilities, entropic_objective, scaling_solve, CostMatrix, KlWeight,
    MarginalConstraint, ScalingConfig, TransportPlan,
};
use crate::error::{arg_err, Error, Result};

fn row_equality(n: usize) -> Result<MarginalConstraint> {
    MarginalConstraint::uniform_equality(n, 1.0)
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(arg_err(format!("rho must lie in (0, 1], got {rho}")));
    }
    Ok(())
}

/// Balanced OT: rows `1/N`, columns `1/K`.
pub fn solve_balanced_ot(pred: &Array2<f64>, cfg: &ScalingConfig) -> Result<TransportPlan> {
    check_probabilities(pred)?;
    let (n, k) = pred.dim();
    let cost = CostMatrix::from_probabilities(pred)?;
    scaling_solve(
        &cost,
        &row_equality(n)?,
        &MarginalConstraint::uniform_equality(k, 1.0)?,
        cfg,
    )
}

/// Unbalanced OT: rows `1/N`, columns pulled toward `1/K` by `lambda * KL`.
pub fn solve_uot(pred: &Array2<f64>, lambda: KlWeight, cfg: &ScalingConfig) -> Result<TransportPlan> {
    check_probabilities(pred)?;
    let (n, k) = pred.dim();
    let cost = CostMatrix::from_probabilities(pred)?;
    scaling_solve(
        &cost,
        &row_equality(n)?,
        &MarginalConstraint::weighted_kl(vec![lambda; k], vec![1.0 / k as f64; k])?,
        cfg,
    )
}

/// Solves on `[C, 0]` with the given column rules for the real clusters and
/// an equality `1 - rho` on the virtual one, then drops the virtual column.
fn solve_with_virtual_column(
    cost: &CostMatrix,
    real_cols: MarginalConstraint,
    rho: f64,
    cfg: &ScalingConfig,
) -> Result<TransportPlan> {
    let (n, k) = (cost.n_rows(), cost.n_cols());
    let ext = cost.with_virtual_column();
    let virt = MarginalConstraint::equality(vec![1.0 - rho])?;
    let col = real_cols.concat(&virt)?;
    let full = scaling_solve(&ext, &row_equality(n)?, &col, cfg)?;
    let coupling = full.coupling.slice(s![.., ..k]).to_owned();
    let objective = entropic_objective(
        &coupling,
        cost.values(),
        &MarginalConstraint::upper(vec![1.0 / n as f64; n])?,
        &real_cols,
        cfg.epsilon,
    );
    Ok(TransportPlan {
        coupling,
        objective,
        ..full
    })
}

/// Partial OT: rows `<= 1/N`, every column exactly `rho/K`, total mass `rho`.
pub fn solve_pot(pred: &Array2<f64>, rho: f64, cfg: &ScalingConfig) -> Result<TransportPlan> {
    check_probabilities(pred)?;
    check_rho(rho)?;
    let k = pred.ncols();
    let cost = CostMatrix::from_probabilities(pred)?;
    let real = MarginalConstraint::weighted_kl(vec![KlWeight::Infinite; k], vec![rho / k as f64; k])?;
    solve_with_virtual_column(&cost, real, rho, cfg)
}

/// SLA: rows `<= 1/N`, columns `<= upper`, total mass `rho`.
pub fn solve_sla(
    pred: &Array2<f64>,
    rho: f64,
    upper: f64,
    cfg: &ScalingConfig,
) -> Result<TransportPlan> {
    check_probabilities(pred)?;
    check_rho(rho)?;
    if !(upper > 0.0) || !upper.is_finite() {
        return Err(arg_err(format!("column upper bound must be > 0, got {upper}")));
    }
    let k = pred.ncols();
    if (k as f64) * upper < rho {
        return Err(Error::Infeasible(format!(
            "{k} columns capped at {upper} cannot hold mass {rho}"
        )));
    }
    let cost = CostMatrix::from_probabilities(pred)?;
    let real = MarginalConstraint::upper(vec![upper; k])?;
    solve_with_virtual_column(&cost, real, rho, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Axis};

    fn cfg() -> ScalingConfig {
        ScalingConfig::default()
    }

    #[test]
    fn balanced_uniform_predictions_give_uniform_plan() {
        let p = Array2::from_elem((5, 4), 0.25);
        let plan = solve_balanced_ot(&p, &cfg()).unwrap();
        for q in plan.coupling.iter() {
            assert!((q - 1.0 / 20.0).abs() < 1e-14);
        }
    }

    #[test]
    fn balanced_forces_half_mass_on_unpopular_cluster() {
        let p = array![[0.9, 0.1], [0.8, 0.2], [0.95, 0.05], [0.7, 0.3]];
        let plan = solve_balanced_ot(&p, &cfg()).unwrap();
        let cols = plan.coupling.sum_axis(Axis(0));
        assert!((cols[1] - 0.5).abs() < 1e-6, "{cols}");
    }

    #[test]
    fn uot_infinite_weight_is_balanced() {
        let p = array![[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8], [0.5, 0.4, 0.1]];
        let a = solve_uot(&p, KlWeight::Infinite, &cfg()).unwrap();
        let b = solve_balanced_ot(&p, &cfg()).unwrap();
        for (x, y) in a.coupling.iter().zip(b.coupling.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn uot_zero_weight_is_scaled_softmax() {
        let p = array![[0.6, 0.4], [0.3, 0.7], [0.9, 0.1]];
        let eps = 0.1;
        let plan = solve_uot(&p, KlWeight::Finite(0.0), &cfg().with_epsilon(eps)).unwrap();
        for i in 0..3 {
            let w: Vec<f64> = p.row(i).iter().map(|x| x.powf(1.0 / eps)).collect();
            let z: f64 = w.iter().sum();
            for j in 0..2 {
                assert!((plan.coupling[[i, j]] - w[j] / z / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uot_interpolates_between_softmax_and_uniform() {
        let p = array![
            [0.8, 0.2],
            [0.7, 0.3],
            [0.9, 0.1],
            [0.6, 0.4],
            [0.3, 0.7],
            [0.75, 0.25]
        ];
        let c = cfg().with_epsilon(0.1);
        let soft = solve_uot(&p, KlWeight::Finite(0.0), &c).unwrap().col_sums();
        let mid = solve_uot(&p, KlWeight::Finite(1.0), &c).unwrap().col_sums();
        assert!(soft[0] > mid[0] && mid[0] > 0.5, "{soft:?} {mid:?}");
        assert!(soft[1] < mid[1] && mid[1] < 0.5);
    }

    #[test]
    fn pot_full_mass_rows_are_tight() {
        let p = array![[0.6, 0.4], [0.3, 0.7], [0.9, 0.1], [0.5, 0.5]];
        let plan = solve_pot(&p, 1.0, &cfg()).unwrap();
        for r in plan.row_sums() {
            assert!((r - 0.25).abs() < 1e-9, "{r}");
        }
    }

    #[test]
    fn pot_uniform_predictions() {
        let p = Array2::from_elem((4, 2), 0.5);
        let plan = solve_pot(&p, 0.3, &cfg()).unwrap();
        for q in plan.coupling.iter() {
            assert!((q - 0.3 / 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn pot_rejects_bad_rho() {
        let p = Array2::from_elem((4, 2), 0.5);
        assert!(solve_pot(&p, 0.0, &cfg()).is_err());
        assert!(solve_pot(&p, 1.5, &cfg()).is_err());
    }

    #[test]
    fn sla_infeasible_caps() {
        let p = Array2::from_elem((4, 2), 0.5);
        assert!(matches!(solve_sla(&p, 0.9, 0.4, &cfg()), Err(Error::Infeasible(_))));
    }

    #[test]
    fn sla_with_loose_caps_collapses_onto_dominant_cluster() {
        // every sample is most confident about cluster 0
        let p = array![
            [0.7, 0.2, 0.1],
            [0.6, 0.3, 0.1],
            [0.8, 0.1, 0.1],
            [0.5, 0.25, 0.25],
            [0.65, 0.3, 0.05],
            [0.55, 0.35, 0.1],
            [0.6, 0.2, 0.2],
            [0.75, 0.15, 0.1]
        ];
        let rho = 0.2;
        let plan = solve_sla(&p, rho, rho, &cfg().with_tol(1e-10)).unwrap();
        let cols = plan.col_sums();
        assert!(cols[0] / plan.total_mass() > 0.95, "{cols:?}");
        assert!((plan.total_mass() - rho).abs() < 1e-6);
    }

    #[test]
    fn sla_tight_caps_equal_pot_and_balanced() {
        let p = array![[0.6, 0.4], [0.3, 0.7], [0.9, 0.1], [0.5, 0.5], [0.2, 0.8]];
        let c = cfg().with_tol(1e-9).with_max_iter(100_000);
        let rho = 0.6;
        let sla = solve_sla(&p, rho, rho / 2.0, &c).unwrap();
        let pot = solve_pot(&p, rho, &c).unwrap();
        for (x, y) in sla.coupling.iter().zip(pot.coupling.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
        let sla = solve_sla(&p, 1.0, 0.5, &c).unwrap();
        let bal = solve_balanced_ot(&p, &c).unwrap();
        for (x, y) in sla.coupling.iter().zip(bal.coupling.iter()) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
