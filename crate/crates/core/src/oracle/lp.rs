use ndarray::Array2;

use super::pgd::RowRule;
use crate::error::{arg_err, dim_err, Error, Result};
use crate::ot_core::CostMatrix;

/// Largest number of plan entries accepted by [`lp_exact_tiny`].
pub const LP_MAX_VARIABLES: usize = 24;

const PIVOT_EPS: f64 = 1e-11;
const FEAS_EPS: f64 = 1e-9;
const FACE_EPS: f64 = 1e-9;

/// `min <Q, C>` over `Q >= 0` with row rules, optional column equalities and
/// an optional total mass.
#[derive(Debug, Clone)]
pub struct LpProblem {
    pub cost: Array2<f64>,
    pub row_rule: RowRule,
    pub row_target: Vec<f64>,
    pub col_target: Option<Vec<f64>>,
    pub total: Option<f64>,
}

impl LpProblem {
    pub fn balanced(cost: &CostMatrix) -> Self {
        let (n, k) = cost.values().dim();
        Self {
            cost: cost.values().clone(),
            row_rule: RowRule::Equality,
            row_target: vec![1.0 / n as f64; n],
            col_target: Some(vec![1.0 / k as f64; k]),
            total: None,
        }
    }

    /// Rows capped at `1/N`, every column exactly `rho/K`.
    pub fn partial(cost: &CostMatrix, rho: f64) -> Self {
        let (n, k) = cost.values().dim();
        Self {
            cost: cost.values().clone(),
            row_rule: RowRule::Upper,
            row_target: vec![1.0 / n as f64; n],
            col_target: Some(vec![rho / k as f64; k]),
            total: Some(rho),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub plan: Array2<f64>,
    pub objective: f64,
}

/// Equality-form LP `min c x, A x = b, x >= 0` solved by a dense two-phase
/// simplex with Bland's rule.
struct Standard {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl Standard {
    fn push(&mut self, mut row: Vec<f64>, rhs: f64, slack: bool) {
        let width = self.a.first().map_or(row.len(), Vec::len);
        row.resize(width, 0.0);
        for r in &mut self.a {
            if slack {
                r.push(0.0);
            }
        }
        if slack {
            row.push(1.0);
        }
        self.a.push(row);
        self.b.push(rhs);
    }

    fn width(&self) -> usize {
        self.a.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Returns an optimal vertex and the reduced costs at the final basis.
/// Variables flagged in `banned` are held at zero.
fn simplex(a: &[Vec<f64>], b: &[f64], c: &[f64], banned: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = a.len();
    let nv = c.len();
    // tableau rows: constraints with artificials, rhs last
    let cols = nv + m + 1;
    let mut t: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
            let mut row = vec![0.0; cols];
            for j in 0..nv {
                row[j] = sign * a[i].get(j).copied().unwrap_or(0.0);
            }
            row[nv + i] = 1.0;
            row[cols - 1] = sign * b[i];
            row
        })
        .collect();
    let mut basis: Vec<usize> = (nv..nv + m).collect();

    let run = |t: &mut Vec<Vec<f64>>, basis: &mut Vec<usize>, cost: &[f64], allowed: usize| -> Result<()> {
        for _ in 0..50_000 {
            // reduced costs
            let entering = (0..allowed).find(|&j| {
                if basis.contains(&j) || banned.get(j).copied().unwrap_or(false) {
                    return false;
                }
                let z: f64 = basis.iter().enumerate().map(|(r, &bv)| cost[bv] * t[r][j]).sum();
                cost[j] - z < -PIVOT_EPS
            });
            let Some(e) = entering else { return Ok(()) };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..t.len() {
                if t[r][e] > PIVOT_EPS {
                    let ratio = t[r][cols - 1] / t[r][e];
                    let better = match leave {
                        None => true,
                        Some((lr, lv)) => ratio < lv - 1e-14 || (ratio <= lv + 1e-14 && basis[r] < basis[lr]),
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((r, _)) = leave else {
                return Err(Error::Infeasible("LP is unbounded".into()));
            };
            pivot(t, r, e);
            basis[r] = e;
        }
        Err(Error::NotConverged("simplex pivot limit".into()))
    };

    // phase one: drive the artificials to zero
    let mut phase1 = vec![0.0; nv + m];
    phase1[nv..].iter_mut().for_each(|x| *x = 1.0);
    run(&mut t, &mut basis, &phase1, nv + m)?;
    let infeas: f64 = basis
        .iter()
        .enumerate()
        .filter(|(_, &bv)| bv >= nv)
        .map(|(r, _)| t[r][cols - 1])
        .sum();
    if infeas > FEAS_EPS {
        return Err(Error::Infeasible(format!("LP constraints cannot be met (residual {infeas:e})")));
    }
    // pivot remaining artificials out; rows that cannot be are redundant
    let mut r = 0;
    while r < t.len() {
        if basis[r] >= nv {
            if let Some(e) = (0..nv).find(|&j| t[r][j].abs() > PIVOT_EPS && !basis.contains(&j) && !banned[j]) {
                pivot(&mut t, r, e);
                basis[r] = e;
            } else {
                t.remove(r);
                basis.remove(r);
                continue;
            }
        }
        r += 1;
    }
    let mut phase2 = c.to_vec();
    phase2.resize(nv + m, 0.0);
    run(&mut t, &mut basis, &phase2, nv)?;
    let mut x = vec![0.0; nv];
    for (r, &bv) in basis.iter().enumerate() {
        if bv < nv {
            x[bv] = t[r][cols - 1].max(0.0);
        }
    }
    let reduced = (0..nv)
        .map(|j| c[j] - basis.iter().enumerate().map(|(r, &bv)| phase2[bv] * t[r][j]).sum::<f64>())
        .collect();
    Ok((x, reduced))
}

fn pivot(t: &mut [Vec<f64>], r: usize, e: usize) {
    let p = t[r][e];
    t[r].iter_mut().for_each(|x| *x /= p);
    let pr = t[r].clone();
    for (i, row) in t.iter_mut().enumerate() {
        if i != r {
            let f = row[e];
            if f != 0.0 {
                for (x, y) in row.iter_mut().zip(&pr) {
                    *x -= f * y;
                }
            }
        }
    }
}

/// Exact minimizer of a tiny transport LP.
///
/// Solves the LP with the simplex method, then breaks ties between optimal
/// plans lexicographically: entry `(0,0)` is minimized among optimal plans,
/// then `(0,1)` with `(0,0)` held, and so on in row-major order.
pub fn lp_exact_tiny(problem: &LpProblem) -> Result<LpSolution> {
    let (n, k) = problem.cost.dim();
    if n * k > LP_MAX_VARIABLES || n == 0 || k == 0 {
        return Err(arg_err(format!("LP oracle takes 1..={LP_MAX_VARIABLES} entries, got {n}x{k}")));
    }
    if problem.row_target.len() != n || problem.col_target.as_ref().is_some_and(|c| c.len() != k) {
        return Err(dim_err("LP targets disagree with the cost shape"));
    }
    let nx = n * k;
    let mut std = Standard { a: Vec::new(), b: Vec::new() };
    for i in 0..n {
        let mut row = vec![0.0; nx];
        row[i * k..(i + 1) * k].iter_mut().for_each(|x| *x = 1.0);
        std.push(row, problem.row_target[i], problem.row_rule == RowRule::Upper);
    }
    if let Some(cols) = &problem.col_target {
        for (j, &t) in cols.iter().enumerate() {
            let mut row = vec![0.0; nx];
            (0..n).for_each(|i| row[i * k + j] = 1.0);
            std.push(row, t, false);
        }
    }
    if let Some(total) = problem.total {
        std.push(vec![1.0; nx], total, false);
    }
    let cost: Vec<f64> = problem.cost.iter().copied().collect();
    let pad = |c: &[f64], w: usize| {
        let mut v = c.to_vec();
        v.resize(w, 0.0);
        v
    };

    // Any optimal dual certifies the optimal face: it is the feasible set
    // with every positive-reduced-cost variable at zero. Each lexicographic
    // stage shrinks the face the same way, so no slack is ever introduced.
    let width = std.width();
    let mut banned = vec![false; width];
    let mut objective_row = pad(&cost, width);
    let mut best = Vec::new();
    for stage in 0..=nx {
        let (x, reduced) = simplex(&std.a, &std.b, &objective_row, &banned)?;
        for (j, &r) in reduced.iter().enumerate() {
            if r > FACE_EPS {
                banned[j] = true;
            }
        }
        best = x;
        if stage < nx {
            objective_row = vec![0.0; width];
            objective_row[stage] = 1.0;
        }
    }
    let plan = Array2::from_shape_vec((n, k), best[..nx].to_vec()).expect("shape");
    let objective = plan.iter().zip(&cost).map(|(a, b)| a * b).sum();
    Ok(LpSolution { plan, objective })
}
