use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, ensure, Context, Result};
use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sp2ot_core::cluster::{generate_imbalanced_mixture, train, DatasetConfig, RunHistory, SolverChoice, TrainConfig};
use sp2ot_core::graph::{adjacency_accuracy, build_semantic_graph, FeatureSet, KernelChoice, SparseMatrix};
use sp2ot_core::io::{format_triplets, matrix_bytes_for_path, read_labels, read_matrix, read_triplets};
use sp2ot_core::metrics::{evaluate, ClusteringScores};
use sp2ot_core::oracle::{lp_exact_tiny, pgd_entropic, ConvexProgram, LpProblem, OracleConfig, LP_MAX_VARIABLES};
use sp2ot_core::p2ot::{
    benchmark_p2ot, p2ot_extended_objective, solve_p2ot_gsa_with_cost, solve_p2ot_with_cost, BenchConfig, Feasibility,
};
use sp2ot_core::sp2ot::{solve_sp2ot, Sp2otProblem, DEFAULT_OUTER_MAX_ITER, DEFAULT_OUTER_TOL};
use sp2ot_core::{CostMatrix, KlWeight, ScalingConfig};

use crate::out::{envelope, num, opt, sibling_json, Csv, Outputs};

/// What a successful command reports back to `main`.
pub struct Outcome {
    pub written: Vec<PathBuf>,
}

/// A solver stopped at its iteration cap while `--strict` was set.
#[derive(Debug)]
pub struct Unconverged;

impl std::fmt::Display for Unconverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("a solver stopped before converging (--strict); no outputs written")
    }
}

impl std::error::Error for Unconverged {}

static STRICT: AtomicBool = AtomicBool::new(false);

pub fn set_strict(on: bool) {
    STRICT.store(on, Ordering::Relaxed);
}

/// Publishes the staged outputs unless strict mode rejects the run.
fn finish(outs: Outputs, unconverged: bool) -> Result<Outcome> {
    if unconverged {
        if STRICT.load(Ordering::Relaxed) {
            return Err(Unconverged.into());
        }
        log::warn!("some solves stopped at their iteration cap");
    }
    Ok(Outcome { written: outs.commit()? })
}

/// Reads a JSON config, rejecting unknown keys.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load_config)
}

fn read_pred(path: &Path) -> Result<Array2<f64>> {
    read_matrix(path).with_context(|| format!("reading predictions {}", path.display()))
}

/// SplitMix64 finalizer; derives independent per-component seeds from one
/// run seed.
pub fn derive_seed(seed: u64, component: u64) -> u64 {
    let mut z = seed ^ component.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const DATA_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;

// ---------------------------------------------------------------- p2ot solve

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct P2otSolveConfig {
    pub rho: f64,
    pub lambda: KlWeight,
    pub scaling: ScalingConfig,
}

impl Default for P2otSolveConfig {
    fn default() -> Self {
        Self { rho: 1.0, lambda: KlWeight::Finite(1.0), scaling: ScalingConfig::default() }
    }
}

pub struct SolveOverrides {
    pub rho: Option<f64>,
    pub lambda: Option<KlWeight>,
    pub eps: Option<f64>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
}

impl SolveOverrides {
    fn apply(&self, rho: &mut f64, lambda: &mut KlWeight, s: &mut ScalingConfig) {
        if let Some(v) = self.rho {
            *rho = v;
        }
        if let Some(v) = self.lambda {
            *lambda = v;
        }
        if let Some(v) = self.eps {
            s.epsilon = v;
        }
        if let Some(v) = self.tol {
            s.tol = v;
        }
        if let Some(v) = self.max_iter {
            s.max_iter = v;
        }
    }
}

pub fn p2ot_solve(pred: &Path, config: Option<&Path>, ov: &SolveOverrides, out: &Path, summary: Option<&Path>) -> Result<Outcome> {
    let mut cfg: P2otSolveConfig = load_or_default(config)?;
    ov.apply(&mut cfg.rho, &mut cfg.lambda, &mut cfg.scaling);
    let p = read_pred(pred)?;
    let cost = CostMatrix::from_probabilities(&p)?;
    let sol = solve_p2ot_with_cost(&cost, cfg.rho, cfg.lambda, &cfg.scaling)?;
    let plan = &sol.plan;
    let feas = Feasibility::of(&plan.coupling, cfg.rho);
    println!(
        "max row excess {:.3e}, total mass error {:.3e}, iterations {}, converged {}",
        feas.max_row_excess, feas.mass_error, plan.iterations, plan.converged
    );
    let result = json!({
        "objective": plan.objective,
        "extended_objective": p2ot_extended_objective(&plan.coupling, cost.values(), cfg.rho, cfg.lambda, cfg.scaling.epsilon),
        "iterations": plan.iterations,
        "converged": plan.converged,
        "virtual_mass": sol.virtual_mass,
        "absorptions": sol.absorptions,
        "feasibility": feas,
        "column_sums": plan.col_sums(),
    });
    let mut outs = Outputs::default();
    outs.add(out, &matrix_bytes_for_path(out, &plan.coupling))?;
    let summary = summary.map_or_else(|| sibling_json(out), Path::to_path_buf);
    outs.add_json(&summary, &envelope("p2ot solve", &cfg, None, &result)?)?;
    finish(outs, !plan.converged)
}

// ---------------------------------------------------------------- p2ot bench

pub fn p2ot_bench(config: Option<&Path>, out: &Path) -> Result<Outcome> {
    let cfg: BenchConfig = load_or_default(config)?;
    let records = benchmark_p2ot(&cfg)?;
    let mut csv = Csv::new(&["solver", "N", "K", "rho", "seed", "wall_ms", "iters", "objective", "converged"]);
    for r in &records {
        csv.row(&[
            r.solver.clone(),
            r.n.to_string(),
            r.k.to_string(),
            num(r.rho),
            r.seed.to_string(),
            format!("{:.4}", r.wall_ms),
            r.iters.to_string(),
            format!("{:.12e}", r.objective),
            r.converged.to_string(),
        ]);
    }
    // GSA / fast wall-time ratio per (N, K, rho, seed)
    let ratios: Vec<_> = records
        .chunks(2)
        .filter(|c| c.len() == 2)
        .map(|c| json!({"N": c[0].n, "K": c[0].k, "rho": c[0].rho, "seed": c[0].seed, "gsa_over_fast": c[1].wall_ms / c[0].wall_ms}))
        .collect();
    for r in &ratios {
        println!("{r}");
    }
    let unconverged = records.iter().any(|r| !r.converged);
    let mut outs = Outputs::default();
    outs.add(out, &csv.into_bytes())?;
    let seed = cfg.seeds.first().copied();
    outs.add_json(&sibling_json(out), &envelope("p2ot bench", &cfg, seed, &json!({"records": records, "ratios": ratios}))?)?;
    finish(outs, unconverged)
}

// ---------------------------------------------------------------- sp2ot solve

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sp2otSolveConfig {
    pub rho: f64,
    pub lambda1: f64,
    pub lambda2: KlWeight,
    pub scaling: ScalingConfig,
    pub outer_tol: f64,
    pub outer_max_iter: usize,
}

impl Default for Sp2otSolveConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            lambda1: 0.0,
            lambda2: KlWeight::Finite(1.0),
            scaling: ScalingConfig::default(),
            outer_tol: DEFAULT_OUTER_TOL,
            outer_max_iter: DEFAULT_OUTER_MAX_ITER,
        }
    }
}

pub fn sp2ot_solve(
    pred: &Path,
    graph: &Path,
    config: Option<&Path>,
    lambda1: Option<f64>,
    ov: &SolveOverrides,
    out: &Path,
    summary: Option<&Path>,
) -> Result<Outcome> {
    let mut cfg: Sp2otSolveConfig = load_or_default(config)?;
    ov.apply(&mut cfg.rho, &mut cfg.lambda2, &mut cfg.scaling);
    if let Some(v) = lambda1 {
        cfg.lambda1 = v;
    }
    let p = read_pred(pred)?;
    let triplets = read_triplets(graph).with_context(|| format!("reading graph {}", graph.display()))?;
    let adjacency = SparseMatrix::from_triplets(p.nrows(), &triplets)?;
    let mut problem = Sp2otProblem::new(p, adjacency, cfg.lambda1, cfg.lambda2, cfg.rho, cfg.scaling)?;
    problem.outer_tol = cfg.outer_tol;
    problem.outer_max_iter = cfg.outer_max_iter;
    problem.validate()?;
    let (plan, trace) = solve_sp2ot(&problem)?;
    let feas = Feasibility::of(&plan.coupling, cfg.rho);
    println!(
        "max row excess {:.3e}, total mass error {:.3e}, outer steps {}, converged {}",
        feas.max_row_excess,
        feas.mass_error,
        trace.steps.len(),
        plan.converged
    );
    let result = json!({
        "objective": plan.objective,
        "inner_iterations": plan.iterations,
        "converged": plan.converged,
        "feasibility": feas,
        "trace": trace,
    });
    let mut outs = Outputs::default();
    outs.add(out, &matrix_bytes_for_path(out, &plan.coupling))?;
    let summary = summary.map_or_else(|| sibling_json(out), Path::to_path_buf);
    outs.add_json(&summary, &envelope("sp2ot solve", &cfg, None, &result)?)?;
    finish(outs, !plan.converged)
}

// ---------------------------------------------------------------- graph build

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub k: usize,
    pub kernel: KernelChoice,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 20, kernel: KernelChoice::Gaussian { sigma: sp2ot_core::graph::Sigma::Median } }
    }
}

pub fn graph_build(
    features: &Path,
    config: Option<&Path>,
    k: Option<usize>,
    kernel: Option<KernelChoice>,
    labels: Option<&Path>,
    out: &Path,
) -> Result<Outcome> {
    let mut cfg: GraphConfig = load_or_default(config)?;
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(kernel) = kernel {
        cfg.kernel = kernel;
    }
    let x = read_matrix(features).with_context(|| format!("reading features {}", features.display()))?;
    let g = build_semantic_graph(&FeatureSet::new(x)?, cfg.kernel, cfg.k)?;
    let accuracy = match labels {
        Some(path) => {
            let l = read_labels(path).with_context(|| format!("reading labels {}", path.display()))?;
            adjacency_accuracy(&g.adjacency, &l)?
        }
        None => None,
    };
    if let Some(a) = accuracy {
        println!("neighbor label agreement {a:.4}");
    }
    let result = json!({"n": g.adjacency.n(), "nnz": g.adjacency.nnz(), "k": g.k, "kernel": g.kernel, "neighbor_accuracy": accuracy});
    let mut outs = Outputs::default();
    outs.add(out, format_triplets(g.adjacency.triplets()).as_bytes())?;
    outs.add_json(&sibling_json(out), &envelope("graph build", &cfg, None, &result)?)?;
    finish(outs, false)
}

// ---------------------------------------------------------------- cluster run

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset and training seeds are derived from this.
    #[serde(default)]
    pub seed: u64,
    pub solver: SolverChoice,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    /// Overwrites the per-component seeds with ones derived from `seed`.
    pub fn resolved(mut self) -> Self {
        self.dataset.seed = derive_seed(self.seed, DATA_STREAM);
        self.train.seed = derive_seed(self.seed, TRAIN_STREAM);
        self
    }
}

const EPOCH_HEADER: &[&str] = &[
    "solver",
    "seed",
    "epoch",
    "rho",
    "lambda1",
    "loss",
    "selection_loss",
    "acc",
    "nmi",
    "f1",
    "ari",
    "head_acc",
    "medium_acc",
    "tail_acc",
    "max_cluster_share",
    "peak_cluster_share",
    "precision",
    "recall",
    "weighted_precision",
    "weighted_recall",
    "solver_failures",
    "unconverged_solves",
];

fn epoch_rows(csv: &mut Csv, h: &RunHistory, seed: u64) {
    for e in &h.epochs {
        let q = e.quality;
        csv.row(&[
            h.solver.name().to_string(),
            seed.to_string(),
            e.epoch.to_string(),
            num(e.rho),
            num(e.lambda1),
            num(e.loss),
            num(e.selection_loss),
            num(e.scores.acc),
            num(e.scores.nmi),
            num(e.scores.f1),
            num(e.scores.ari),
            opt(e.scores.head_acc),
            opt(e.scores.medium_acc),
            opt(e.scores.tail_acc),
            num(e.max_cluster_share),
            num(e.peak_cluster_share),
            opt(q.map(|q| q.precision)),
            opt(q.map(|q| q.recall)),
            opt(q.map(|q| q.weighted_precision)),
            opt(q.map(|q| q.weighted_recall)),
            e.solver_failures.to_string(),
            e.unconverged_solves.to_string(),
        ]);
    }
}

fn unconverged_in(h: &RunHistory) -> bool {
    h.epochs.iter().any(|e| e.unconverged_solves > 0 || e.solver_failures > 0)
}

pub fn cluster_run(config: &Path, out_dir: &Path) -> Result<Outcome> {
    let cfg = load_config::<RunConfig>(config)?.resolved();
    cfg.train.validate(cfg.solver)?;
    let data = generate_imbalanced_mixture(&cfg.dataset)?;
    let history = train(&data, cfg.solver, &cfg.train)?;
    if let Some(last) = history.epochs.last() {
        println!("{} final ACC {:.4} NMI {:.4} ARI {:.4}", cfg.solver.name(), last.scores.acc, last.scores.nmi, last.scores.ari);
    }
    let mut csv = Csv::new(EPOCH_HEADER);
    epoch_rows(&mut csv, &history, cfg.seed);
    let mut outs = Outputs::default();
    let result = json!({"class_counts": data.class_counts, "imbalance_ratio": data.imbalance_ratio, "history": history});
    outs.add_json(&out_dir.join("history.json"), &envelope("cluster run", &cfg, Some(cfg.seed), &result)?)?;
    outs.add(&out_dir.join("metrics.csv"), &csv.into_bytes())?;
    finish(outs, unconverged_in(&history))
}

// ---------------------------------------------------------------- cluster ablate

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    /// Seed of the shared dataset.
    #[serde(default)]
    pub data_seed: u64,
    /// One training run per seed and solver.
    pub seeds: Vec<u64>,
    #[serde(default = "all_solvers")]
    pub solvers: Vec<SolverChoice>,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Worker threads; runs are independent.
    #[serde(default = "one")]
    pub threads: usize,
}

fn all_solvers() -> Vec<SolverChoice> {
    SolverChoice::ALL.to_vec()
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize)]
struct AblateRow {
    solver: SolverChoice,
    seed: u64,
    scores: ClusteringScores,
    unconverged: bool,
}

pub fn cluster_ablate(config: &Path, out_dir: &Path) -> Result<Outcome> {
    let mut cfg: AblateConfig = load_config(config)?;
    ensure!(!cfg.seeds.is_empty() && !cfg.solvers.is_empty(), "seeds and solvers must be non-empty");
    ensure!(cfg.threads >= 1, "threads must be >= 1");
    cfg.dataset.seed = derive_seed(cfg.data_seed, DATA_STREAM);
    for &s in &cfg.solvers {
        cfg.train.validate(s)?;
    }
    let data = generate_imbalanced_mixture(&cfg.dataset)?;
    let jobs: Vec<(SolverChoice, u64)> = cfg
        .solvers
        .iter()
        .flat_map(|&s| cfg.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunHistory>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.threads.min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(solver, seed)) = jobs.get(i) else { break };
                let tcfg = TrainConfig { seed: derive_seed(seed, TRAIN_STREAM), ..cfg.train.clone() };
                let r = train(&data, solver, &tcfg).map_err(anyhow::Error::from);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("workers joined");

    let mut table = Csv::new(&["solver", "seed", "acc", "nmi", "f1", "ari", "head_acc", "medium_acc", "tail_acc"]);
    let mut epochs = Csv::new(EPOCH_HEADER);
    let mut rows = Vec::new();
    for (&(solver, seed), r) in jobs.iter().zip(results) {
        let h = r.expect("every job ran").with_context(|| format!("{} seed {seed}", solver.name()))?;
        let Some(last) = h.epochs.last() else { bail!("{} seed {seed}: empty history", solver.name()) };
        let s = last.scores.clone();
        println!("{:>6} seed {seed}: ACC {:.4} NMI {:.4} F1 {:.4} ARI {:.4}", solver.name(), s.acc, s.nmi, s.f1, s.ari);
        table.row(&[
            solver.name().to_string(),
            seed.to_string(),
            num(s.acc),
            num(s.nmi),
            num(s.f1),
            num(s.ari),
            opt(s.head_acc),
            opt(s.medium_acc),
            opt(s.tail_acc),
        ]);
        epoch_rows(&mut epochs, &h, seed);
        rows.push(AblateRow { solver, seed, scores: s, unconverged: unconverged_in(&h) });
    }
    let unconverged = rows.iter().any(|r| r.unconverged);
    let mut outs = Outputs::default();
    outs.add(&out_dir.join("ablation.csv"), &table.into_bytes())?;
    outs.add(&out_dir.join("epochs.csv"), &epochs.into_bytes())?;
    let seed = Some(cfg.data_seed);
    outs.add_json(&out_dir.join("ablation.json"), &envelope("cluster ablate", &cfg, seed, &json!({"runs": rows}))?)?;
    finish(outs, unconverged)
}

// ---------------------------------------------------------------- metrics eval

#[derive(Debug, Clone, Serialize)]
struct MetricsInputs {
    pred: PathBuf,
    truth: PathBuf,
    n_classes: usize,
}

pub fn metrics_eval(pred: &Path, truth: &Path, n_classes: Option<usize>, out: &Path) -> Result<Outcome> {
    let p = read_labels(pred).with_context(|| format!("reading {}", pred.display()))?;
    let t = read_labels(truth).with_context(|| format!("reading {}", truth.display()))?;
    ensure!(p.len() == t.len(), "{} predictions but {} ground-truth labels", p.len(), t.len());
    let k = n_classes.unwrap_or_else(|| t.iter().max().map_or(0, |m| m + 1));
    let scores = evaluate(&p, &t, k)?;
    println!("ACC {:.4} NMI {:.4} F1 {:.4} ARI {:.4}", scores.acc, scores.nmi, scores.f1, scores.ari);
    let mut csv = Csv::new(&["acc", "nmi", "f1", "ari", "head_acc", "medium_acc", "tail_acc"]);
    csv.row(&[
        num(scores.acc),
        num(scores.nmi),
        num(scores.f1),
        num(scores.ari),
        opt(scores.head_acc),
        opt(scores.medium_acc),
        opt(scores.tail_acc),
    ]);
    let inputs = MetricsInputs { pred: pred.into(), truth: truth.into(), n_classes: k };
    let mut outs = Outputs::default();
    outs.add_json(out, &envelope("metrics eval", &inputs, None, &scores)?)?;
    outs.add(&out.with_extension("csv"), &csv.into_bytes())?;
    finish(outs, false)
}

// ---------------------------------------------------------------- oracle check

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCheckConfig {
    pub rho: f64,
    pub lambda: KlWeight,
    pub scaling: ScalingConfig,
    pub oracle: OracleConfig,
    /// Relative objective agreement required between solver and oracle.
    pub rel_tol: f64,
}

impl Default for OracleCheckConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            lambda: KlWeight::Finite(1.0),
            scaling: ScalingConfig::default().with_tol(1e-12).with_max_iter(100_000),
            oracle: OracleConfig::default(),
            rel_tol: 1e-5,
        }
    }
}

/// Cross-checks fast P2OT against GSA and the projected-gradient oracle on
/// one instance. Returns `Ok(false)` on disagreement.
pub fn oracle_check(pred: &Path, config: Option<&Path>, ov: &SolveOverrides, out: &Path) -> Result<(Outcome, bool)> {
    let mut cfg: OracleCheckConfig = load_or_default(config)?;
    ov.apply(&mut cfg.rho, &mut cfg.lambda, &mut cfg.scaling);
    let p = read_pred(pred)?;
    let cost = CostMatrix::from_probabilities(&p)?;
    let eps = cfg.scaling.epsilon;
    let fast = solve_p2ot_with_cost(&cost, cfg.rho, cfg.lambda, &cfg.scaling)?.plan;
    let gsa = solve_p2ot_gsa_with_cost(&cost, cfg.rho, cfg.lambda, &cfg.scaling)?;
    let program = ConvexProgram::p2ot_extended(&cost, cfg.rho, cfg.lambda, eps);
    let oracle = pgd_entropic(&program, &cfg.oracle)?;
    let fast_ext = p2ot_extended_objective(&fast.coupling, cost.values(), cfg.rho, cfg.lambda, eps);
    let rel = (fast_ext - oracle.objective).abs() / oracle.objective.abs().max(1e-300);
    let agree = rel <= cfg.rel_tol;
    let lp = if p.len() <= LP_MAX_VARIABLES && cfg.lambda.is_infinite() {
        Some(lp_exact_tiny(&LpProblem::partial(&cost, cfg.rho))?.objective)
    } else {
        None
    };
    println!(
        "fast {fast_ext:.10e} oracle {:.10e} relative gap {rel:.3e} ({})",
        oracle.objective,
        if agree { "agree" } else { "DISAGREE" }
    );
    let result = json!({
        "fast_extended_objective": fast_ext,
        "fast_objective": fast.objective,
        "fast_converged": fast.converged,
        "gsa_objective": gsa.objective,
        "gsa_converged": gsa.converged,
        "oracle_objective": oracle.objective,
        "oracle_iterations": oracle.iterations,
        "oracle_residual": oracle.residual,
        "relative_gap": rel,
        "agree": agree,
        "lp_objective": lp,
    });
    let mut outs = Outputs::default();
    outs.add_json(out, &envelope("oracle check", &cfg, None, &result)?)?;
    Ok((finish(outs, !fast.converged || !gsa.converged)?, agree))
}
