use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::graph::SparseMatrix;
use crate::ot_core::{CostMatrix, KlWeight};
use crate::sp2ot::sp2ot_gradient;

/// Interior floor for the entropy term.
pub const ORACLE_FLOOR: f64 = 1e-12;

/// Largest constraint violation accepted from a projection.
const PROJECTION_TOL: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// First trial step of the backtracking search.
    pub step_size: f64,
    pub max_iter: usize,
    /// Stop once the scaled gradient-mapping norm falls below this.
    pub tol: f64,
    /// A line search that can no longer make representable progress counts
    /// as converged when the residual is already below this.
    pub stall_tol: f64,
    /// Dykstra cycles per projection.
    pub max_projection_cycles: usize,
    /// Keep the objective of every iterate in the solution.
    pub record_trace: bool,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            max_iter: 2_000_000,
            tol: 1e-9,
            stall_tol: 1e-7,
            max_projection_cycles: 10_000,
            record_trace: false,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !(self.tol > 0.0) || !(self.stall_tol >= self.tol) || self.max_iter == 0 || self.max_projection_cycles == 0 {
            return Err(arg_err("oracle step_size and tol must be > 0, stall_tol >= tol, iteration caps >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowRule {
    Equality,
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ColRule {
    Free,
    Equality(f64),
    Upper(f64),
    /// `lambda KL(col, target)` in the objective.
    Kl { lambda: f64, target: f64 },
}

/// `min <X, C> + sum_j KL-penalties - eps H(X)` over
/// `{X >= floor, row rules, column rules, optional total mass}`.
#[derive(Debug, Clone)]
pub struct ConvexProgram {
    pub cost: Array2<f64>,
    pub row_rule: RowRule,
    pub row_target: Vec<f64>,
    pub cols: Vec<ColRule>,
    pub total: Option<f64>,
    pub epsilon: f64,
    /// Leading columns that form the reported plan; the rest are auxiliary
    /// (the virtual cluster).
    pub plan_cols: usize,
}

fn col_rule(w: KlWeight, target: f64) -> ColRule {
    match w {
        KlWeight::Infinite => ColRule::Equality(target),
        KlWeight::Finite(l) if l == 0.0 => ColRule::Free,
        KlWeight::Finite(l) => ColRule::Kl { lambda: l, target },
    }
}

fn with_zero_column(cost: &CostMatrix) -> Array2<f64> {
    cost.with_virtual_column().into_inner()
}

impl ConvexProgram {
    pub fn balanced(cost: &CostMatrix, eps: f64) -> Self {
        let (n, k) = cost.values().dim();
        Self {
            cost: cost.values().clone(),
            row_rule: RowRule::Equality,
            row_target: vec![1.0 / n as f64; n],
            cols: vec![ColRule::Equality(1.0 / k as f64); k],
            total: None,
            epsilon: eps,
            plan_cols: k,
        }
    }

    pub fn uot(cost: &CostMatrix, lambda: KlWeight, eps: f64) -> Self {
        let k = cost.n_cols();
        Self {
            cols: vec![col_rule(lambda, 1.0 / k as f64); k],
            ..Self::balanced(cost, eps)
        }
    }

    /// `[Q, xi]` with exact rows `1/N` and `xi` carrying `1 - rho`; the
    /// entropy covers `xi` as well.
    /// At `rho = 1` the virtual column is empty and is left out, since the
    /// entry floor could not hold it at zero.
    pub fn p2ot_extended(cost: &CostMatrix, rho: f64, lambda: KlWeight, eps: f64) -> Self {
        let (n, k) = cost.values().dim();
        if rho >= 1.0 {
            return Self::uot(cost, lambda, eps);
        }
        let mut cols = vec![col_rule(lambda, rho / k as f64); k];
        cols.push(ColRule::Equality(1.0 - rho));
        Self {
            cost: with_zero_column(cost),
            row_rule: RowRule::Equality,
            row_target: vec![1.0 / n as f64; n],
            cols,
            total: None,
            epsilon: eps,
            plan_cols: k,
        }
    }

    /// `Q` alone: rows at most `1/N`, total mass `rho`.
    pub fn p2ot_q_only(cost: &CostMatrix, rho: f64, lambda: KlWeight, eps: f64) -> Self {
        let (n, k) = cost.values().dim();
        Self {
            cost: cost.values().clone(),
            row_rule: RowRule::Upper,
            row_target: vec![1.0 / n as f64; n],
            cols: vec![col_rule(lambda, rho / k as f64); k],
            total: Some(rho),
            epsilon: eps,
            plan_cols: k,
        }
    }

    /// Extended program with columns fixed at `rho/K`.
    pub fn pot_extended(cost: &CostMatrix, rho: f64, eps: f64) -> Self {
        Self::p2ot_extended(cost, rho, KlWeight::Infinite, eps)
    }

    /// Extended program with columns capped at `upper`.
    pub fn sla_extended(cost: &CostMatrix, rho: f64, upper: f64, eps: f64) -> Self {
        let mut p = Self::p2ot_extended(cost, rho, KlWeight::Infinite, eps);
        let k = p.plan_cols;
        for c in &mut p.cols[..k] {
            *c = ColRule::Upper(upper);
        }
        p
    }

    /// One linearized SP2OT step at `plan`: the extended P2OT program on
    /// `C0 - lambda1 (A + Aᵀ) plan`.
    pub fn sp2ot_linearized(
        cost0: &CostMatrix,
        adjacency: &SparseMatrix,
        lambda1: f64,
        plan: &Array2<f64>,
        rho: f64,
        lambda2: KlWeight,
        eps: f64,
    ) -> Result<Self> {
        let c = sp2ot_gradient(cost0, adjacency, lambda1, plan)?;
        Ok(Self::p2ot_extended(&c, rho, lambda2, eps))
    }

    fn validate(&self) -> Result<()> {
        let (n, m) = self.cost.dim();
        if n == 0 || m == 0 || self.row_target.len() != n || self.cols.len() != m || self.plan_cols > m {
            return Err(dim_err("oracle program dimensions disagree"));
        }
        if !(self.epsilon > 0.0) {
            return Err(arg_err("oracle needs eps > 0"));
        }
        Ok(())
    }

    /// Objective at `x`, using `0 log 0 = 0`.
    pub fn objective(&self, x: &Array2<f64>) -> f64 {
        let lin: f64 = x.iter().zip(self.cost.iter()).map(|(a, c)| a * c).sum();
        let ent: f64 = x.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum();
        let mut kl = 0.0;
        for (j, rule) in self.cols.iter().enumerate() {
            if let ColRule::Kl { lambda, target } = *rule {
                let s = x.column(j).sum();
                kl += lambda * (if s > 0.0 { s * (s / target).ln() } else { 0.0 } - s + target);
            }
        }
        lin + kl + self.epsilon * ent
    }

    fn gradient(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for (j, rule) in self.cols.iter().enumerate() {
            let extra = match *rule {
                ColRule::Kl { lambda, target } => lambda * (x.column(j).sum() / target).ln(),
                _ => 0.0,
            };
            for i in 0..x.nrows() {
                g[[i, j]] = self.cost[[i, j]] + extra + self.epsilon * (x[[i, j]].ln() + 1.0);
            }
        }
        g
    }

    /// Dykstra's alternating projections between the linear constraints
    /// (projected exactly) and the floor `x >= ORACLE_FLOOR`, in the metric
    /// `sum_i (y_i - z_i)^2 / w_i`. Returns the projection and its largest
    /// constraint violation.
    fn project(&self, z: &Array2<f64>, w: &Array2<f64>, cycles: usize) -> (Array2<f64>, f64) {
        let lin = self.linear_constraints();
        let mut y = z.clone();
        let mut inc_lin = Array2::<f64>::zeros(z.dim());
        let mut inc_box = Array2::<f64>::zeros(z.dim());
        let mut last = f64::INFINITY;
        for _ in 0..cycles {
            let input = &y + &inc_lin;
            let out = project_linear(&lin, &input, w);
            inc_lin = &input - &out;
            let input = &out + &inc_box;
            let clipped = input.mapv(|v| v.max(ORACLE_FLOOR));
            inc_box = &input - &clipped;
            let change = clipped.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            y = clipped;
            last = self.violation(&y);
            if last <= PROJECTION_TOL && (change == 0.0 || inc_box.iter().all(|&v| v == 0.0)) {
                break;
            }
        }
        (y, last)
    }

    /// Largest violation of the row, column and total constraints.
    pub fn violation(&self, y: &Array2<f64>) -> f64 {
        let mut worst = 0.0f64;
        for (i, r) in y.rows().into_iter().enumerate() {
            let d = r.sum() - self.row_target[i];
            worst = worst.max(if self.row_rule == RowRule::Upper { d.max(0.0) } else { d.abs() });
        }
        for (j, rule) in self.cols.iter().enumerate() {
            let s = y.column(j).sum();
            worst = worst.max(match *rule {
                ColRule::Equality(t) => (s - t).abs(),
                ColRule::Upper(t) => (s - t).max(0.0),
                _ => 0.0,
            });
        }
        if let Some(t) = self.total {
            let s: f64 = y.columns().into_iter().take(self.plan_cols).map(|c| c.sum()).sum();
            worst = worst.max((s - t).abs());
        }
        worst
    }

    /// Rows, hard columns and the total as linear constraints on the
    /// flattened variable.
    fn linear_constraints(&self) -> Vec<Linear> {
        let (n, m) = self.cost.dim();
        let mut out = Vec::new();
        for i in 0..n {
            out.push(Linear {
                cells: (i * m..(i + 1) * m).collect(),
                target: self.row_target[i],
                upper: self.row_rule == RowRule::Upper,
            });
        }
        for (j, rule) in self.cols.iter().enumerate() {
            let (target, upper) = match *rule {
                ColRule::Equality(t) => (t, false),
                ColRule::Upper(t) => (t, true),
                _ => continue,
            };
            out.push(Linear { cells: (0..n).map(|i| i * m + j).collect(), target, upper });
        }
        if let Some(t) = self.total {
            let cells = (0..n).flat_map(|i| (0..self.plan_cols).map(move |j| i * m + j)).collect();
            out.push(Linear { cells, target: t, upper: false });
        }
        out
    }

}

/// `sum_{c in cells} x_c = target`, or `<= target` when `upper`.
#[derive(Debug, Clone)]
struct Linear {
    cells: Vec<usize>,
    target: f64,
    upper: bool,
}

/// Exact projection onto linear equalities and inequalities in the metric
/// `sum (y - z)^2 / w`, by an active-set loop over the inequalities. Each
/// trial solves the normal equations `A W Aᵀ lambda = A z - b` restricted to
/// the active rows.
fn project_linear(lin: &[Linear], z: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let zf = z.as_slice().expect("standard layout");
    let wf = w.as_slice().expect("standard layout");
    let value = |l: &Linear, x: &[f64]| l.cells.iter().map(|&c| x[c]).sum::<f64>();
    let mut active: Vec<bool> = lin.iter().map(|l| !l.upper || value(l, zf) > l.target).collect();
    let mut y = zf.to_vec();
    for _ in 0..4 * lin.len() + 4 {
        let idx: Vec<usize> = (0..lin.len()).filter(|&r| active[r]).collect();
        let k = idx.len();
        let mut mat = vec![vec![0.0; k]; k];
        let mut rhs = vec![0.0; k];
        let mut member = vec![Vec::new(); zf.len()];
        for (a, &r) in idx.iter().enumerate() {
            rhs[a] = value(&lin[r], zf) - lin[r].target;
            for &c in &lin[r].cells {
                member[c].push(a);
            }
        }
        for (c, rows) in member.iter().enumerate() {
            for &a in rows {
                for &b in rows {
                    mat[a][b] += wf[c];
                }
            }
        }
        let lambda = solve_psd(mat, rhs);
        y = zf.to_vec();
        for (c, rows) in member.iter().enumerate() {
            let shift: f64 = rows.iter().map(|&a| lambda[a]).sum();
            y[c] -= wf[c] * shift;
        }
        // drop the most negative inequality multiplier, else add the most
        // violated inactive inequality
        let neg = idx
            .iter()
            .enumerate()
            .filter(|(a, &r)| lin[r].upper && lambda[*a] < -1e-300)
            .min_by(|p, q| lambda[p.0].total_cmp(&lambda[q.0]));
        if let Some((_, &r)) = neg {
            active[r] = false;
            continue;
        }
        let viol = (0..lin.len())
            .filter(|&r| !active[r])
            .map(|r| (r, value(&lin[r], &y) - lin[r].target))
            .filter(|&(_, v)| v > 0.0)
            .max_by(|p, q| p.1.total_cmp(&q.1));
        match viol {
            Some((r, _)) => active[r] = true,
            None => break,
        }
    }
    Array2::from_shape_vec(z.dim(), y).expect("shape")
}

/// Solves a symmetric positive semidefinite system by Gaussian elimination
/// with full pivoting; directions with negligible pivots get a zero
/// component, which is exact for consistent singular systems.
fn solve_psd(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rank = n;
    for k in 0..n {
        let (mut pi, mut pj, mut best) = (k, k, 0.0);
        for i in k..n {
            for j in k..n {
                if a[i][j].abs() > best {
                    (pi, pj, best) = (i, j, a[i][j].abs());
                }
            }
        }
        if best <= 1e-13 * scale {
            rank = k;
            break;
        }
        a.swap(k, pi);
        b.swap(k, pi);
        for row in a.iter_mut() {
            row.swap(k, pj);
        }
        perm.swap(k, pj);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            if f != 0.0 {
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..rank).rev() {
        let s: f64 = (k + 1..rank).map(|j| a[k][j] * x[j]).sum();
        x[k] = (b[k] - s) / a[k][k];
    }
    let mut out = vec![0.0; n];
    for (k, &p) in perm.iter().enumerate() {
        out[p] = x[k];
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    /// Full variable, auxiliary columns included.
    pub x: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Scaled gradient-mapping norm at the returned iterate.
    pub residual: f64,
    /// Largest change in the final Dykstra cycle of the last projection.
    pub projection_residual: f64,
    pub trace: Vec<f64>,
}

impl OracleSolution {
    pub fn plan(&self, program: &ConvexProgram) -> Array2<f64> {
        self.x.slice(ndarray::s![.., ..program.plan_cols]).to_owned()
    }
}

/// Projected gradient descent with a diagonal metric `diag(x)` (the inverse
/// entropy curvature) and Armijo backtracking along the projection arc.
/// Every accepted step decreases the objective.
///
/// Fails with [`Error::NotConverged`] if the gradient mapping does not drop
/// below `cfg.tol` within `cfg.max_iter` steps.
pub fn pgd_entropic(program: &ConvexProgram, cfg: &OracleConfig) -> Result<OracleSolution> {
    program.validate()?;
    cfg.validate()?;
    let (n, m) = program.cost.dim();
    let start = {
        let total = program.total.unwrap_or(program.row_target.iter().sum());
        Array2::from_elem((n, m), total / (n * m) as f64)
    };
    let ones = Array2::from_elem((n, m), 1.0);
    let (mut x, pr0) = program.project(&start, &ones, cfg.max_projection_cycles);
    if pr0 > PROJECTION_TOL {
        return Err(Error::Infeasible(format!("oracle feasible set looks empty (violation {pr0:e})")));
    }
    let mut f = program.objective(&x);
    let mut trace = if cfg.record_trace { vec![f] } else { Vec::new() };
    let mut step = cfg.step_size;
    let mut proj_res = 0.0;

    for it in 1..=cfg.max_iter {
        let g = program.gradient(&x);
        let d = x.mapv(|v| v.max(ORACLE_FLOOR));
        // scaled gradient mapping: the fixed-point gap of a unit step
        let (p1, _) = program.project(&(&x - &(&d * &g)), &d, cfg.max_projection_cycles);
        let residual = (&p1 - &x).iter().map(|v| v.abs()).fold(0.0, f64::max);
        if residual <= cfg.tol {
            return Ok(OracleSolution { objective: f, x, iterations: it - 1, residual, projection_residual: proj_res, trace });
        }
        let mut s = step;
        let accepted = loop {
            let (y, pr) = program.project(&(&x - &(&d * &g * s)), &d, cfg.max_projection_cycles);
            // an unconverged projection is not a valid trial point, and no
            // entry may shrink by more than a factor of ten in one step
            let interior = y.iter().zip(x.iter()).all(|(&a, &b)| a >= 0.1 * b);
            if pr <= PROJECTION_TOL && interior {
                let fy = program.objective(&y);
                let decrease: f64 = g.iter().zip(y.iter().zip(x.iter())).map(|(gi, (yi, xi))| gi * (yi - xi)).sum();
                // slack for rounding once the decrease is at the last few ulps of f
                let slack = 8.0 * f64::EPSILON * f.abs();
                // the arc must not overshoot the minimum along the step; the
                // gradient resolves this long after f differences vanish
                let ahead: f64 = program.gradient(&y).iter().zip(y.iter().zip(x.iter())).map(|(gi, (yi, xi))| gi * (yi - xi)).sum();
                if fy <= f + 1e-4 * decrease + slack && ahead <= 0.5 * decrease.abs() {
                    break Some((y, fy, pr));
                }
            }
            s *= 0.5;
            if s < 1e-30 {
                break None;
            }
        };
        // no representable progress left: accept if already at the precision floor
        let Some((y, fy, pr)) = accepted.filter(|(y, _, _)| y != &x) else {
            if residual <= cfg.stall_tol {
                return Ok(OracleSolution { objective: f, x, iterations: it - 1, residual, projection_residual: proj_res, trace });
            }
            return Err(Error::NotConverged(format!(
                "PGD oracle line search stalled at iteration {it} (residual {residual:e})"
            )));
        };
        x = y;
        f = fy;
        proj_res = pr;
        if cfg.record_trace {
            trace.push(f);
        }
        // let the step grow back after backtracking
        step = (s * 2.0).min(cfg.step_size * 1e6);
    }
    Err(Error::NotConverged(format!("PGD oracle after {} iterations", cfg.max_iter)))
}
