use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::buffer::MemoryBuffer;
use super::dataset::SyntheticDataset;
use super::model::{swapped_loss, PrototypeModel};
use super::quality::{pseudo_label_quality, PseudoLabelQuality};
use crate::curriculum::{Schedule, ScheduleKind};
use crate::error::{arg_err, Result};
use crate::exec::Parallelism;
use crate::graph::{build_semantic_graph, FeatureSet, KernelChoice, Sigma, SparseMatrix};
use crate::metrics::{evaluate, ClusteringScores};
use crate::ot_core::{solve_balanced_ot, solve_pot, solve_sla, solve_uot, KlWeight, ScalingConfig, TransportPlan};
use crate::p2ot::{solve_p2ot_fast, P2otProblem};
use crate::sp2ot::{lambda1_decayed, solve_sp2ot, Sp2otProblem};

/// Pseudo-label generator used inside the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverChoice {
    Ot,
    Uot,
    Pot,
    Sla,
    P2ot,
    Sp2ot,
}

impl SolverChoice {
    pub const ALL: [SolverChoice; 6] = [Self::Ot, Self::Uot, Self::Pot, Self::Sla, Self::P2ot, Self::Sp2ot];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ot => "ot",
            Self::Uot => "uot",
            Self::Pot => "pot",
            Self::Sla => "sla",
            Self::P2ot => "p2ot",
            Self::Sp2ot => "sp2ot",
        }
    }

    fn uses_rho(self) -> bool {
        !matches!(self, Self::Ot | Self::Uot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_size: usize,
    /// First epoch (1-based) whose pseudo-labels see the buffer.
    pub buffer_start_epoch: usize,
    /// `total_steps` is overwritten with the run length.
    pub schedule: Schedule,
    pub epsilon: f64,
    pub lambda2: KlWeight,
    pub lambda1_0: f64,
    pub knn_k: usize,
    pub kernel: KernelChoice,
    /// SLA column cap. The default of 1 keeps the cap above every `rho`.
    pub sla_upper: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    /// View noise in units of the per-dimension feature std.
    pub noise_scale: f64,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 512,
            buffer_size: 5120,
            buffer_start_epoch: 2,
            schedule: Schedule { kind: ScheduleKind::Sigmoid, rho0: 0.1, total_steps: 1 },
            epsilon: 0.1,
            lambda2: KlWeight::Finite(1.0),
            lambda1_0: 1000.0,
            knn_k: 20,
            kernel: KernelChoice::Gaussian { sigma: Sigma::Median },
            sla_upper: 1.0,
            inner_tol: 1e-6,
            inner_max_iter: 1000,
            temperature: 10.0,
            learning_rate: 20.0,
            noise_scale: 0.1,
            seed: 0,
            parallelism: Parallelism::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, solver: SolverChoice) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.buffer_start_epoch == 0 {
            return Err(arg_err("epochs, batch_size and buffer_start_epoch must be >= 1"));
        }
        self.schedule.validate()?;
        if solver.uses_rho() && self.schedule.rho0 <= 0.0 {
            return Err(arg_err(format!("{} needs rho0 > 0", solver.name())));
        }
        if !(self.noise_scale >= 0.0) || !(self.lambda1_0 >= 0.0) {
            return Err(arg_err("noise_scale and lambda1_0 must be >= 0"));
        }
        if solver == SolverChoice::Sp2ot && self.knn_k == 0 {
            return Err(arg_err("knn_k must be >= 1"));
        }
        self.scaling().validate()
    }

    fn scaling(&self) -> ScalingConfig {
        ScalingConfig::default()
            .with_epsilon(self.epsilon)
            .with_tol(self.inner_tol)
            .with_max_iter(self.inner_max_iter)
            .with_parallelism(self.parallelism)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub rho: f64,
    pub lambda1: f64,
    pub loss: f64,
    /// `loss / rho`.
    pub selection_loss: f64,
    /// Largest share of samples the model puts in one cluster after the step.
    pub max_cluster_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub scores: ClusteringScores,
    /// View-1 pseudo-labels of the epoch; `None` if nothing was selected.
    pub quality: Option<PseudoLabelQuality>,
    pub loss: f64,
    pub selection_loss: f64,
    pub rho: f64,
    pub lambda1: f64,
    /// At the end of the epoch.
    pub max_cluster_share: f64,
    /// Largest value seen after any step of the epoch.
    pub peak_cluster_share: f64,
    pub solver_failures: usize,
    pub unconverged_solves: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub solver: SolverChoice,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl RunHistory {
    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("at least one epoch")
    }
}

/// Per-row argmax.
pub fn hard_labels(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0)
        .collect()
}

fn max_share(labels: &[usize], k: usize) -> f64 {
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    *counts.iter().max().unwrap_or(&0) as f64 / labels.len().max(1) as f64
}

struct PseudoLabeler<'a> {
    solver: SolverChoice,
    cfg: &'a TrainConfig,
    scaling: ScalingConfig,
    graph: Option<SparseMatrix>,
}

impl PseudoLabeler<'_> {
    fn solve(&self, pred: &Array2<f64>, indices: &[usize], rho: f64, lambda1: f64) -> Result<TransportPlan> {
        let c = &self.scaling;
        match self.solver {
            SolverChoice::Ot => solve_balanced_ot(pred, c),
            SolverChoice::Uot => solve_uot(pred, self.cfg.lambda2, c),
            SolverChoice::Pot => solve_pot(pred, rho, c),
            SolverChoice::Sla => solve_sla(pred, rho, self.cfg.sla_upper, c),
            SolverChoice::P2ot => solve_p2ot_fast(&P2otProblem::new(pred.clone(), rho, self.cfg.lambda2, *c)?),
            SolverChoice::Sp2ot => {
                let a = self.graph.as_ref().expect("graph is built for sp2ot").sub_graph(indices)?;
                let problem = Sp2otProblem::new(pred.clone(), a, lambda1, self.cfg.lambda2, rho, *c)?;
                Ok(solve_sp2ot(&problem)?.0)
            }
        }
    }
}

/// Two-view self-labeling with the chosen pseudo-label solver.
///
/// Each step draws a batch, perturbs it twice with Gaussian noise, solves for
/// pseudo-labels on buffer-plus-batch predictions of each view, and takes one
/// gradient step on the swapped cross-entropy over the batch rows. Plan rows
/// are rescaled by `rows / batch` so the loss is a per-sample mean. A solver
/// error skips the update and is counted; training continues.
pub fn train(data: &SyntheticDataset, solver: SolverChoice, cfg: &TrainConfig) -> Result<RunHistory> {
    cfg.validate(solver)?;
    let n = data.n();
    let k = data.n_classes();
    if n < k || data.features.nrows() != n {
        return Err(arg_err("dataset needs at least one sample per class"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = PrototypeModel::from_samples(&data.features, k, cfg.seed ^ 0x9e37_79b9, cfg.temperature, cfg.learning_rate)?;
    let noise_std = data.features.std_axis(Axis(0), 0.0) * cfg.noise_scale;
    let graph = if solver == SolverChoice::Sp2ot {
        let feats = FeatureSet::new(data.features.clone())?;
        Some(build_semantic_graph(&feats, cfg.kernel, cfg.knn_k.min(n - 1))?.adjacency)
    } else {
        None
    };
    let labeler = PseudoLabeler { solver, cfg, scaling: cfg.scaling(), graph };

    let iters = n.div_ceil(cfg.batch_size);
    let schedule = cfg.schedule.with_total_steps((cfg.epochs * iters - 1).max(1))?;
    let mut buffer = MemoryBuffer::new(cfg.buffer_size);
    let mut history = RunHistory { solver, epochs: Vec::new(), steps: Vec::new() };
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut q_rows: Vec<f64> = Vec::new();
        let mut q_labels = Vec::new();
        let (mut failures, mut unconverged) = (0, 0);
        let (mut loss_sum, mut sel_sum, mut counted) = (0.0, 0.0, 0);
        let (mut rho, mut lambda1) = (0.0, 0.0);
        let mut peak: f64 = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            rho = schedule.rho_at(step)?;
            lambda1 = lambda1_decayed(cfg.lambda1_0, rho);
            let x = data.features.select(Axis(0), batch);
            let mut view = || {
                let mut z = x.clone();
                for mut row in z.rows_mut() {
                    for (v, sd) in row.iter_mut().zip(noise_std.iter()) {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *v += sd * e;
                    }
                }
                z
            };
            let z1 = view();
            let z2 = view();
            let p1 = model.predict_probs(&z1)?;
            let p2 = model.predict_probs(&z2)?;
            let stacked = if epoch >= cfg.buffer_start_epoch {
                buffer.stack(batch, &p1, &p2)?
            } else {
                MemoryBuffer::new(0).stack(batch, &p1, &p2)?
            };
            assert_eq!(stacked.p1.nrows(), stacked.indices.len());
            assert_eq!(&stacked.indices[stacked.batch_start..], batch);

            let plans = labeler
                .solve(&stacked.p1, &stacked.indices, rho, lambda1)
                .and_then(|a| Ok((a, labeler.solve(&stacked.p2, &stacked.indices, rho, lambda1)?)));
            buffer.push(batch, &p1, &p2)?;
            let (plan1, plan2) = match plans {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("epoch {epoch} step {step}: pseudo-label solver failed: {e}");
                    failures += 1;
                    step += 1;
                    continue;
                }
            };
            unconverged += usize::from(!plan1.converged) + usize::from(!plan2.converged);
            let rows = stacked.indices.len() as f64;
            let scale = rows / batch.len() as f64;
            let q1 = plan1.coupling.slice(s![stacked.batch_start.., ..]).to_owned() * scale;
            let q2 = plan2.coupling.slice(s![stacked.batch_start.., ..]).to_owned() * scale;
            let loss = swapped_loss(&q1, &q2, &p1, &p2)?;
            let grad = model.cross_entropy_grad(&z1, &p1, &q2) + model.cross_entropy_grad(&z2, &p2, &q1);
            model.step(&grad);

            // per-sample selected fraction in [0, 1]
            q_rows.extend((&q1 * batch.len() as f64).iter());
            q_labels.extend(batch.iter().map(|&i| data.labels[i]));
            let share = max_share(&hard_labels(&model.predict_probs(&data.features)?), k);
            peak = peak.max(share);
            history.steps.push(StepRecord {
                step,
                epoch,
                rho,
                lambda1,
                loss,
                selection_loss: loss / rho,
                max_cluster_share: share,
            });
            loss_sum += loss;
            sel_sum += loss / rho;
            counted += 1;
            step += 1;
        }
        let pred = hard_labels(&model.predict_probs(&data.features)?);
        let quality = if q_labels.is_empty() {
            None
        } else {
            pseudo_label_quality(&Array2::from_shape_vec((q_labels.len(), k), q_rows).expect("k entries per row"), &q_labels)?
        };
        let mean = |v: f64| if counted == 0 { f64::NAN } else { v / counted as f64 };
        history.epochs.push(EpochRecord {
            epoch,
            scores: evaluate(&pred, &data.labels, k)?,
            quality,
            loss: mean(loss_sum),
            selection_loss: mean(sel_sum),
            rho,
            lambda1,
            max_cluster_share: max_share(&pred, k),
            peak_cluster_share: peak,
            solver_failures: failures,
            unconverged_solves: unconverged,
        });
        log::info!(
            "{} epoch {epoch}: acc {:.4} rho {rho:.3} loss {:.4}",
            solver.name(),
            history.last().scores.acc,
            history.last().loss
        );
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn argmax_labels_and_share() {
        let p = array![[0.1, 0.9], [0.6, 0.4], [0.5, 0.5]];
        let l = hard_labels(&p);
        assert_eq!(l, vec![1, 0, 0]);
        assert!((max_share(&l, 2) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate(SolverChoice::P2ot).is_ok());
        assert!(TrainConfig { epochs: 0, ..cfg.clone() }.validate(SolverChoice::Ot).is_err());
        assert!(TrainConfig { knn_k: 0, ..cfg.clone() }.validate(SolverChoice::Sp2ot).is_err());
        assert!(TrainConfig { epsilon: -1.0, ..cfg.clone() }.validate(SolverChoice::Uot).is_err());
        assert!(serde_json::from_str::<TrainConfig>(r#"{"epochs": 3, "solver_typo": 1}"#).is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"epochs": 3}"#).unwrap();
        assert_eq!((parsed.epochs, parsed.batch_size), (3, 512));
    }

    #[test]
    fn solver_names_round_trip() {
        for s in SolverChoice::ALL {
            let j = serde_json::to_string(&s).unwrap();
            assert_eq!(j, format!("\"{}\"", s.name()));
            assert_eq!(serde_json::from_str::<SolverChoice>(&j).unwrap(), s);
        }
    }
}
