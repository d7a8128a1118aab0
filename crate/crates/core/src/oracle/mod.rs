//! Independent reference solvers used to cross-check the fast paths.

pub mod kmeans;
pub mod lp;
pub mod pgd;

pub use kmeans::{kmeans, KMeansResult};
pub use lp::{lp_exact_tiny, LpProblem, LpSolution, LP_MAX_VARIABLES};
pub use pgd::{pgd_entropic, ColRule, ConvexProgram, OracleConfig, OracleSolution, RowRule, ORACLE_FLOOR};
