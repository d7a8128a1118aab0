use ndarray::{Array2, Axis};

use super::{EntryRule, KlWeight, MarginalConstraint};

/// `H(Q) = -sum Q log Q` with `0 log 0 = 0`.
pub fn entropy(q: &Array2<f64>) -> f64 {
    -q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

/// Unnormalised `KL(x, y) = sum x log(x/y) - x + y` with `0 log 0 = 0`.
pub fn kl_divergence(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "kl_divergence: length mismatch");
    x.iter().zip(y).map(|(&x, &y)| kl_term(x, y)).sum()
}

fn kl_term(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        y
    } else if y == 0.0 {
        f64::INFINITY
    } else {
        x * (x / y).ln() - x + y
    }
}

/// Value of the marginal term evaluated at `marginal`. Hard constraints
/// (equality, upper bound, infinite KL weight) contribute nothing; feasibility
/// is checked elsewhere.
pub fn marginal_penalty(constraint: &MarginalConstraint, marginal: &[f64]) -> f64 {
    assert_eq!(constraint.len(), marginal.len(), "marginal_penalty: length mismatch");
    constraint
        .target()
        .iter()
        .zip(marginal)
        .enumerate()
        .map(|(i, (&t, &x))| match constraint.rule(i) {
            EntryRule::Kl(KlWeight::Finite(l)) if l > 0.0 => l * kl_term(x, t),
            _ => 0.0,
        })
        .sum()
}

/// `<Q, C> + F1(Q 1) + F2(Q^T 1) - eps H(Q)`.
pub fn entropic_objective(
    q: &Array2<f64>,
    cost: &Array2<f64>,
    row: &MarginalConstraint,
    col: &MarginalConstraint,
    epsilon: f64,
) -> f64 {
    assert_eq!(q.dim(), cost.dim(), "entropic_objective: plan and cost differ in shape");
    let transport: f64 = q.iter().zip(cost.iter()).map(|(q, c)| q * c).sum();
    let rows = q.sum_axis(Axis(1));
    let cols = q.sum_axis(Axis(0));
    transport
        + marginal_penalty(row, rows.as_slice().unwrap())
        + marginal_penalty(col, cols.as_slice().unwrap())
        - epsilon * entropy(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn empty_plan_without_penalties_is_zero() {
        let q = Array2::zeros((2, 3));
        let c = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]];
        let r = MarginalConstraint::uniform_equality(2, 1.0).unwrap();
        let col = MarginalConstraint::upper(vec![0.5; 3]).unwrap();
        assert_eq!(entropic_objective(&q, &c, &r, &col, 0.1), 0.0);
        // the unnormalised KL of an empty marginal is the target mass
        let kl = MarginalConstraint::kl(2.0, vec![0.25; 3]).unwrap();
        assert!((entropic_objective(&q, &c, &r, &kl, 0.1) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn uniform_plan_zero_cost() {
        let q = Array2::from_elem((2, 2), 0.25);
        let c = Array2::zeros((2, 2));
        let r = MarginalConstraint::uniform_equality(2, 1.0).unwrap();
        let eps = 0.1;
        let want = eps * 4.0 * 0.25 * 0.25f64.ln();
        assert!((entropic_objective(&q, &c, &r, &r, eps) - want).abs() < 1e-15);
    }

    #[test]
    fn kl_edge_cases() {
        assert_eq!(kl_divergence(&[0.0], &[0.3]), 0.3);
        assert_eq!(kl_divergence(&[0.2], &[0.0]), f64::INFINITY);
        assert!(kl_divergence(&[0.4, 0.6], &[0.4, 0.6]).abs() < 1e-16);
    }
}
