use ndarray::Array2;

use super::prox::scaling_factor;
use super::{
    entropic_objective, CostMatrix, EntryRule, MarginalConstraint, ScalingConfig, TransportPlan,
    KERNEL_FLOOR, MASS_TOLERANCE,
};
use crate::error::{dim_err, Error, Result};
use crate::exec::{self, Parallelism};

/// Kernel `exp((u_i + v_j - C_ij) / eps)` with absorbed log-potentials.
///
/// `diag(a) K diag(b)` is invariant under [`GaugeKernel::absorb`], which moves
/// `eps * ln(a)` and `eps * ln(b)` into the potentials and resets the scaling
/// vectors to one.
pub(crate) struct GaugeKernel<'a> {
    cost: &'a [f64],
    cost_cols: usize,
    cols: usize,
    eps: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub m: Vec<f64>,
    par: Parallelism,
}

impl<'a> GaugeKernel<'a> {
    /// Rows with negative costs start with `u_i = min_j C_ij` so every kernel
    /// entry is at most one; non-negative costs start from `u = 0`.
    pub fn new(cost: &'a [f64], cols: usize, eps: f64, par: Parallelism) -> Self {
        Self::with_zero_columns(cost, cols, 0, eps, par)
    }

    /// Kernel of `[C, 0]`: `extra` zero-cost columns appended on the fly, so
    /// the extended cost never has to be materialized.
    pub fn with_zero_columns(cost: &'a [f64], cost_cols: usize, extra: usize, eps: f64, par: Parallelism) -> Self {
        let u: Vec<f64> = cost
            .chunks(cost_cols)
            .map(|row| row.iter().copied().fold(0.0, f64::min))
            .collect();
        let cols = cost_cols + extra;
        let mut k = Self {
            cost,
            cost_cols,
            cols,
            eps,
            m: vec![0.0; u.len() * cols],
            u,
            v: vec![0.0; cols],
            par,
        };
        k.rebuild();
        k
    }

    pub fn rows(&self) -> usize {
        self.u.len()
    }

    pub fn rebuild(&mut self) {
        let (cost, cc, cols, eps) = (self.cost, self.cost_cols, self.cols, self.eps);
        let (u, v) = (&self.u, &self.v);
        exec::for_each_row_mut(&mut self.m, cols, self.par, |i, row| {
            let c = &cost[i * cc..(i + 1) * cc];
            let (real, zero) = row.split_at_mut(cc);
            for ((m, &cij), &vj) in real.iter_mut().zip(c).zip(v) {
                *m = ((u[i] + vj - cij) / eps).exp().max(KERNEL_FLOOR);
            }
            for (m, &vj) in zero.iter_mut().zip(&v[cc..]) {
                *m = ((u[i] + vj) / eps).exp().max(KERNEL_FLOOR);
            }
        });
    }

    pub fn mul(&self, b: &[f64], out: &mut [f64]) {
        exec::mat_vec(&self.m, self.cols, b, out, self.par);
    }

    pub fn mul_t(&self, a: &[f64], out: &mut [f64]) {
        exec::mat_t_vec(&self.m, self.cols, a, out, self.par);
    }

    /// Moves positive scaling entries into the potentials. Zero entries stay
    /// zero. Returns the previous `b` for callers that keep extra state.
    pub fn absorb(&mut self, a: &mut [f64], b: &mut [f64]) {
        for (ui, ai) in self.u.iter_mut().zip(a.iter_mut()) {
            if *ai > 0.0 {
                *ui += self.eps * ai.ln();
                *ai = 1.0;
            }
        }
        for (vj, bj) in self.v.iter_mut().zip(b.iter_mut()) {
            if *bj > 0.0 {
                *vj += self.eps * bj.ln();
                *bj = 1.0;
            }
        }
        self.rebuild();
    }

    pub fn coupling(&self, a: &[f64], b: &[f64]) -> Array2<f64> {
        self.coupling_cols(a, b, self.cols)
    }

    /// The first `keep` columns of `diag(a) K diag(b)`.
    pub fn coupling_cols(&self, a: &[f64], b: &[f64], keep: usize) -> Array2<f64> {
        let cols = self.cols;
        let mut q = vec![0.0; self.rows() * keep];
        let m = &self.m;
        exec::for_each_row_mut(&mut q, keep, self.par, |i, row| {
            let mi = &m[i * cols..i * cols + keep];
            for ((x, &mij), bj) in row.iter_mut().zip(mi).zip(b) {
                *x = a[i] * mij * bj;
            }
        });
        Array2::from_shape_vec((self.rows(), keep), q).expect("shape")
    }

    /// Column sums of `diag(a) K diag(b)` from column `from` on.
    pub fn tail_mass(&self, a: &[f64], b: &[f64], from: usize) -> f64 {
        let cols = self.cols;
        let per_row: Vec<f64> = (0..self.rows())
            .map(|i| {
                let mi = &self.m[i * cols + from..(i + 1) * cols];
                mi.iter().zip(&b[from..]).map(|(m, bj)| a[i] * m * bj).sum()
            })
            .collect();
        exec::block_sum(&per_row)
    }
}

pub(crate) fn max_abs_diff(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

pub(crate) fn exceeds(threshold: f64, vs: &[&[f64]]) -> bool {
    vs.iter().any(|v| v.iter().any(|x| *x > threshold))
}

pub(crate) fn check_finite(iteration: usize, what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iteration,
            what: format!("{what} (enable or lower stabilization_threshold)"),
        })
    }
}

fn update(out: &mut [f64], kv: &[f64], rules: &[EntryRule], target: &[f64], pot: &[f64], eps: f64) {
    for i in 0..out.len() {
        out[i] = scaling_factor(rules[i], kv[i], target[i], pot[i], eps);
    }
}

/// Generic entropic scaling solver.
///
/// Iterates `a = prox_row(K b) / (K b)`, `b = prox_col(K^T a) / (K^T a)` from
/// `b = 1` until the L∞ change of `b` drops below `cfg.tol` and the closing
/// row half-step would move at most `cfg.tol` mass, absorbing the
/// scaling vectors into the kernel whenever an entry exceeds
/// `cfg.stabilization_threshold`. A final row half-step is applied before the
/// plan is formed, so equality-constrained rows are met to rounding.
pub fn scaling_solve(
    cost: &CostMatrix,
    row: &MarginalConstraint,
    col: &MarginalConstraint,
    cfg: &ScalingConfig,
) -> Result<TransportPlan> {
    cfg.validate()?;
    let (n, k) = (cost.n_rows(), cost.n_cols());
    if row.len() != n || col.len() != k {
        return Err(dim_err(format!(
            "cost is {n}x{k} but marginals have {} and {} entries",
            row.len(),
            col.len()
        )));
    }
    if row.is_all_equality() && col.is_all_equality() {
        let (mr, mc): (f64, f64) = (row.target().iter().sum(), col.target().iter().sum());
        if (mr - mc).abs() > MASS_TOLERANCE * mr.abs().max(mc.abs()).max(1.0) {
            return Err(Error::Infeasible(format!(
                "row mass {mr} differs from column mass {mc}"
            )));
        }
    }
    let eps = cfg.epsilon;
    let (row_rules, col_rules) = (row.rules(), col.rules());
    let mut kernel = GaugeKernel::new(cost.as_slice(), k, eps, cfg.parallelism);

    let mut a = vec![1.0; n];
    let mut b = vec![1.0; k];
    let mut a_trial = vec![0.0; n];
    let mut b_next = vec![0.0; k];
    let mut kb = vec![0.0; n];
    let mut kta = vec![0.0; k];
    let mut residuals = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    // K b is reused when the convergence check already formed it for this b
    let mut kb_fresh = false;

    for it in 1..=cfg.max_iter {
        iterations = it;
        if !kb_fresh {
            kernel.mul(&b, &mut kb);
        }
        kb_fresh = false;
        update(&mut a, &kb, &row_rules, row.target(), &kernel.u, eps);
        check_finite(it, "row scaling", &a)?;
        kernel.mul_t(&a, &mut kta);
        update(&mut b_next, &kta, &col_rules, col.target(), &kernel.v, eps);
        check_finite(it, "column scaling", &b_next)?;

        let change = max_abs_diff(&b, &b_next);
        std::mem::swap(&mut b, &mut b_next);
        residuals.push(change);
        if change < cfg.tol {
            // the closing row half-step may move at most `tol` mass
            kernel.mul(&b, &mut kb);
            kb_fresh = true;
            update(&mut a_trial, &kb, &row_rules, row.target(), &kernel.u, eps);
            let shift: f64 = a.iter().zip(&a_trial).zip(&kb).map(|((x, y), m)| (x - y).abs() * m).sum();
            if shift <= cfg.tol {
                converged = true;
                break;
            }
        }
        if exceeds(cfg.stabilization_threshold, &[&a, &b]) {
            kernel.absorb(&mut a, &mut b);
            kb_fresh = false;
        }
    }

    if !kb_fresh {
        kernel.mul(&b, &mut kb);
    }
    update(&mut a, &kb, &row_rules, row.target(), &kernel.u, eps);
    check_finite(iterations, "row scaling", &a)?;
    let coupling = kernel.coupling(&a, &b);
    if coupling.iter().any(|q| !q.is_finite()) {
        return Err(Error::NonFinite {
            iteration: iterations,
            what: "coupling".into(),
        });
    }
    let objective = entropic_objective(&coupling, cost.values(), row, col, eps);
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
    use ndarray::array;

    fn cfg() -> ScalingConfig {
        ScalingConfig::default()
    }

    #[test]
    fn zero_cost_gives_outer_product() {
        let cost = CostMatrix::new(Array2::zeros((3, 2))).unwrap();
        let mu = vec![0.2, 0.3, 0.5];
        let nu = vec![0.4, 0.6];
        let plan = scaling_solve(
            &cost,
            &MarginalConstraint::equality(mu.clone()).unwrap(),
            &MarginalConstraint::equality(nu.clone()).unwrap(),
            &cfg(),
        )
        .unwrap();
        assert!(plan.converged);
        for i in 0..3 {
            for j in 0..2 {
                assert!((plan.coupling[[i, j]] - mu[i] * nu[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_by_two_concentrates_on_diagonal() {
        let p = array![[0.9, 0.1], [0.1, 0.9]];
        let cost = CostMatrix::from_probabilities(&p).unwrap();
        let half = MarginalConstraint::equality(vec![0.5, 0.5]).unwrap();
        let plan = scaling_solve(&cost, &half, &half, &cfg().with_epsilon(0.01)).unwrap();
        // exact LP optimum is diag(0.5, 0.5)
        let lp = array![[0.5, 0.0], [0.0, 0.5]];
        for (q, l) in plan.coupling.iter().zip(lp.iter()) {
            assert!((q - l).abs() < 1e-3, "{}", plan.coupling);
        }
    }

    #[test]
    fn vanishing_column_penalty_is_rowwise_softmax() {
        let c = array![[0.3, 1.2, 0.1], [2.0, 0.5, 0.4]];
        let cost = CostMatrix::new(c.clone()).unwrap();
        let eps = 0.5;
        let mu = vec![0.25, 0.75];
        let plan = scaling_solve(
            &cost,
            &MarginalConstraint::equality(mu.clone()).unwrap(),
            &MarginalConstraint::kl(0.0, vec![1.0 / 3.0; 3]).unwrap(),
            &cfg().with_epsilon(eps),
        )
        .unwrap();
        for i in 0..2 {
            let z: f64 = c.row(i).iter().map(|x| (-x / eps).exp()).sum();
            for j in 0..3 {
                let want = mu[i] * (-c[[i, j]] / eps).exp() / z;
                assert!((plan.coupling[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn incompatible_masses_are_rejected() {
        let cost = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        let r = MarginalConstraint::equality(vec![0.5, 0.5]).unwrap();
        let c = MarginalConstraint::equality(vec![0.5, 0.6]).unwrap();
        assert!(matches!(
            scaling_solve(&cost, &r, &c, &cfg()),
            Err(Error::Infeasible(_))
        ));
        let c = MarginalConstraint::equality(vec![0.5]).unwrap();
        assert!(matches!(scaling_solve(&cost, &r, &c, &cfg()), Err(Error::Dimension(_))));
    }

    #[test]
    fn stabilization_resolves_costs_below_the_kernel_floor() {
        // Rows 1 and 2 compete for the spare mass of column 0 at costs 9 and
        // 8.5. With eps = 0.01 both kernel entries underflow to the floor, so
        // the unstabilized solve cannot tell them apart and splits the mass.
        let c = array![[0.0, 8.0], [9.0, 0.0], [8.5, 0.0]];
        let cost = CostMatrix::new(c).unwrap();
        let r = MarginalConstraint::uniform_equality(3, 1.0).unwrap();
        let col = MarginalConstraint::uniform_equality(2, 1.0).unwrap();
        let tight = cfg().with_epsilon(0.01).with_max_iter(20_000);
        let plan = scaling_solve(&cost, &r, &col, &tight).unwrap();
        assert!(plan.converged);
        assert!((plan.coupling[[2, 0]] - 1.0 / 6.0).abs() < 1e-6, "{}", plan.coupling);
        assert!(plan.coupling[[1, 0]] < 1e-6);
        let naive = scaling_solve(&cost, &r, &col, &tight.unstabilized()).unwrap();
        assert!((naive.coupling[[1, 0]] - naive.coupling[[2, 0]]).abs() < 1e-9);
        assert!(naive.objective > plan.objective + 0.01);
    }

    #[test]
    fn unconverged_flag_is_honest() {
        let c = array![[0.0, 8.0], [9.0, 0.0], [8.5, 0.0]];
        let cost = CostMatrix::new(c).unwrap();
        let r = MarginalConstraint::uniform_equality(3, 1.0).unwrap();
        let col = MarginalConstraint::uniform_equality(2, 1.0).unwrap();
        let plan = scaling_solve(&cost, &r, &col, &cfg().with_epsilon(0.01).with_max_iter(2)).unwrap();
        assert!(!plan.converged);
        assert_eq!(plan.iterations, 2);
    }
}
