//! Entropic optimal transport by matrix scaling.
//!
//! Problems have the form
//!
//! ```text
//! min_Q  <Q, C> + F1(Q 1, mu) + F2(Q^T 1, nu) - eps * H(Q),   Q >= 0
//! ```
//!
//! where each marginal term is an equality, an upper bound, or a (weighted)
//! unnormalised KL penalty. [`scaling_solve`] alternates the KL proximal steps
//! on the two scaling vectors of `Q = diag(a) exp(-C/eps) diag(b)`.

mod objective;
mod prox;
pub(crate) mod scaling;
mod solvers;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::exec::Parallelism;

pub use objective::{entropic_objective, entropy, kl_divergence, marginal_penalty};
pub use prox::{prox_equality, prox_kl, prox_upper, prox_weighted_kl};
pub use scaling::scaling_solve;
pub(crate) use scaling::GaugeKernel;
pub use solvers::{solve_balanced_ot, solve_pot, solve_sla, solve_uot};

/// Predictions are clamped to this before taking `-ln`.
pub const PROBABILITY_FLOOR: f64 = 1e-8;
/// Lower clamp on kernel entries `exp(-C/eps)`.
pub const KERNEL_FLOOR: f64 = 1e-300;
/// Relative tolerance on `sum(mu) == sum(nu)` for equality/equality problems.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// Dense `N × K` cost with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(dim_err("cost matrix must have at least one row and column"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(arg_err("cost matrix has non-finite entries"));
        }
        Ok(Self {
            values: values.as_standard_layout().into_owned(),
        })
    }

    /// `C = -ln(max(P, PROBABILITY_FLOOR))`.
    pub fn from_probabilities(pred: &Array2<f64>) -> Result<Self> {
        if pred.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(arg_err("probabilities must be finite and non-negative"));
        }
        Self::new(pred.mapv(|p| -p.max(PROBABILITY_FLOOR).ln()))
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("standard layout")
    }

    /// Appends an all-zero column (the virtual cluster).
    pub fn with_virtual_column(&self) -> CostMatrix {
        let (n, k) = self.values.dim();
        let mut ext = Array2::zeros((n, k + 1));
        ext.slice_mut(ndarray::s![.., ..k]).assign(&self.values);
        CostMatrix { values: ext }
    }
}

/// Weight of a KL marginal penalty; `Infinite` turns the penalty into an
/// equality and is realised with a proximal exponent of exactly 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KlWeight {
    Finite(f64),
    Infinite,
}

impl KlWeight {
    /// `f = lambda / (lambda + eps)`.
    pub fn exponent(self, epsilon: f64) -> f64 {
        match self {
            KlWeight::Finite(l) => l / (l + epsilon),
            KlWeight::Infinite => 1.0,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, KlWeight::Infinite)
    }
}

impl fmt::Display for KlWeight {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KlWeight::Finite(v) => write!(f, "{v}"),
            KlWeight::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for KlWeight {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" => Ok(KlWeight::Infinite),
            other => {
                let v: f64 = other
                    .parse()
                    .map_err(|_| arg_err(format!("bad KL weight `{s}`")))?;
                if !(v >= 0.0) || v.is_infinite() {
                    return Err(arg_err(format!(
                        "KL weight must be finite and >= 0 (use `inf` for equality), got {s}"
                    )));
                }
                Ok(KlWeight::Finite(v))
            }
        }
    }
}

impl Serialize for KlWeight {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            KlWeight::Finite(v) => s.serialize_f64(*v),
            KlWeight::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for KlWeight {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => KlWeight::from_str(&v.to_string()).map_err(serde::de::Error::custom),
            Raw::Text(t) => KlWeight::from_str(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// How a single marginal coordinate is constrained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EntryRule {
    Equality,
    Upper,
    Kl(KlWeight),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConstraintKind {
    Equality,
    InequalityUpper,
    KlPenalty(f64),
    WeightedKlPenalty(Vec<KlWeight>),
    /// Heterogeneous coordinates, e.g. real clusters plus a virtual one.
    PerEntry(Vec<EntryRule>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginalConstraint {
    kind: ConstraintKind,
    target: Vec<f64>,
}

impl MarginalConstraint {
    pub fn new(kind: ConstraintKind, target: Vec<f64>) -> Result<Self> {
        if target.is_empty() {
            return Err(dim_err("marginal target is empty"));
        }
        if target.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(arg_err("marginal target entries must be finite and >= 0"));
        }
        match &kind {
            ConstraintKind::KlPenalty(l) if !(*l >= 0.0) || !l.is_finite() => {
                return Err(arg_err("KL weight must be finite and >= 0"));
            }
            ConstraintKind::WeightedKlPenalty(w) => {
                if w.len() != target.len() {
                    return Err(dim_err(format!(
                        "{} weights for {} targets",
                        w.len(),
                        target.len()
                    )));
                }
                if w.iter()
                    .any(|w| matches!(w, KlWeight::Finite(v) if !(*v >= 0.0) || !v.is_finite()))
                {
                    return Err(arg_err("KL weights must be >= 0"));
                }
            }
            ConstraintKind::PerEntry(r) if r.len() != target.len() => {
                return Err(dim_err(format!("{} rules for {} targets", r.len(), target.len())));
            }
            _ => {}
        }
        Ok(Self { kind, target })
    }

    pub fn equality(target: Vec<f64>) -> Result<Self> {
        Self::new(ConstraintKind::Equality, target)
    }

    pub fn upper(target: Vec<f64>) -> Result<Self> {
        Self::new(ConstraintKind::InequalityUpper, target)
    }

    pub fn kl(weight: f64, target: Vec<f64>) -> Result<Self> {
        Self::new(ConstraintKind::KlPenalty(weight), target)
    }

    pub fn weighted_kl(weights: Vec<KlWeight>, target: Vec<f64>) -> Result<Self> {
        Self::new(ConstraintKind::WeightedKlPenalty(weights), target)
    }

    pub fn uniform_equality(n: usize, mass: f64) -> Result<Self> {
        Self::equality(vec![mass / n as f64; n])
    }

    pub fn kind(&self) -> &ConstraintKind {
        &self.kind
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }

    pub fn len(&self) -> usize {
        self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target.is_empty()
    }

    pub fn rule(&self, i: usize) -> EntryRule {
        match &self.kind {
            ConstraintKind::Equality => EntryRule::Equality,
            ConstraintKind::InequalityUpper => EntryRule::Upper,
            ConstraintKind::KlPenalty(l) => EntryRule::Kl(KlWeight::Finite(*l)),
            ConstraintKind::WeightedKlPenalty(w) => EntryRule::Kl(w[i]),
            ConstraintKind::PerEntry(r) => r[i],
        }
    }

    pub fn rules(&self) -> Vec<EntryRule> {
        (0..self.len()).map(|i| self.rule(i)).collect()
    }

    /// True when every coordinate is pinned to its target.
    pub fn is_all_equality(&self) -> bool {
        self.rules()
            .iter()
            .all(|r| matches!(r, EntryRule::Equality | EntryRule::Kl(KlWeight::Infinite)))
    }

    /// Concatenates coordinates, e.g. real clusters followed by the virtual one.
    pub fn concat(&self, other: &MarginalConstraint) -> Result<Self> {
        let mut rules = self.rules();
        rules.extend(other.rules());
        let mut target = self.target.clone();
        target.extend_from_slice(&other.target);
        Self::new(ConstraintKind::PerEntry(rules), target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    /// Entropic weight.
    pub epsilon: f64,
    /// Stop once the L∞ change of `b` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    /// Absorb the scaling vectors into the kernel once an entry exceeds this;
    /// `f64::INFINITY` disables stabilization.
    #[serde(with = "threshold_serde")]
    pub stabilization_threshold: f64,
    pub parallelism: Parallelism,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            tol: 1e-6,
            max_iter: 1000,
            stabilization_threshold: 1e6,
            parallelism: Parallelism::default(),
        }
    }
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

impl ScalingConfig {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_parallelism(mut self, parallelism: Parallelism) -> Self {
        self.parallelism = parallelism;
        self
    }

    pub fn unstabilized(mut self) -> Self {
        self.stabilization_threshold = f64::INFINITY;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(arg_err(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(arg_err(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(arg_err("max_iter must be >= 1"));
        }
        if !(self.stabilization_threshold > 1.0) {
            return Err(arg_err("stabilization_threshold must exceed 1"));
        }
        Ok(())
    }
}

/// A non-negative coupling plus solver bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// False when `max_iter` was reached first.
    pub converged: bool,
    /// L∞ change of `b` after each iteration.
    pub residuals: Vec<f64>,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling.sum_axis(Axis(1)).to_vec()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        self.coupling.sum_axis(Axis(0)).to_vec()
    }

    pub fn total_mass(&self) -> f64 {
        self.coupling.sum()
    }

    /// `max_i (row_i - cap)`, negative when every row is strictly below the cap.
    pub fn max_row_excess(&self, cap: f64) -> f64 {
        self.row_sums()
            .into_iter()
            .map(|r| r - cap)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn check_probabilities(pred: &Array2<f64>) -> Result<()> {
    if pred.nrows() == 0 || pred.ncols() == 0 {
        return Err(dim_err("prediction matrix is empty"));
    }
    for (i, row) in pred.rows().into_iter().enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(arg_err(format!("row {i} has invalid probabilities")));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(arg_err(format!("row {i} sums to {s}, expected 1")));
        }
    }
    Ok(())
}
