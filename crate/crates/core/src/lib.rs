//! Optimal-transport pseudo-label generation for imbalanced clustering.
//!
//! The crate is organised bottom-up:
//!
//! * [`ot_core`] – the generic entropic matrix-scaling solver with proximal
//!   marginal operators, and the balanced / unbalanced / partial / SLA variants.
//! * [`p2ot`] – the progressive partial transport solver: virtual-cluster
//!   extension solved by a stabilised scaling recursion, plus the generalized
//!   scaling baseline and a timing harness.
//! * [`sp2ot`] – the semantic-regularised outer loop (linearise, then project
//!   with the P2OT solver).
//! * [`graph`] – kNN affinity graphs over feature vectors.
//! * [`curriculum`] – schedules for the selected-mass fraction and the
//!   semantic weight decay.
//! * [`cluster`] – a synthetic long-tailed clustering harness that trains a
//!   prototype model on solver-generated pseudo-labels.
//! * [`metrics`] – clustering accuracy, NMI, macro-F1, ARI, head/medium/tail.
//! * [`oracle`] – slow independent reference solvers used for verification.
//!
//! Dense linear algebra in the solvers goes through [`exec`], which runs on
//! rayon when the `parallel` feature is enabled and sequentially otherwise.
//! Both paths produce bit-identical results.

pub mod cluster;
pub mod curriculum;
pub mod error;
pub mod exec;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod ot_core;
pub mod p2ot;
pub mod sp2ot;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use ot_core::{
    ConstraintKind, CostMatrix, EntryRule, KlWeight, MarginalConstraint, ScalingConfig,
    TransportPlan,
};
