//! `sp2ot` command-line driver.
//!
//! Exit codes: 0 on success, 1 on any validation or I/O error (nothing is
//! written) or when `oracle check` finds a disagreement (the report is still
//! written), 2 when `--strict` is set and a solver hit its iteration cap.

mod commands;
mod out;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use sp2ot_core::graph::{KernelChoice, Sigma};
use sp2ot_core::KlWeight;

use commands::{Outcome, SolveOverrides};

#[derive(Parser)]
#[command(name = "sp2ot", version, about = "Partial optimal-transport pseudo-labels: solvers, graphs, clustering runs")]
struct Cli {
    /// Exit with status 2 if any solver stops before converging; no outputs are written.
    #[arg(long, global = true)]
    strict: bool,
    /// Log verbosity (repeat for more).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Progressive partial transport.
    #[command(subcommand)]
    P2ot(P2otCmd),
    /// Semantic-regularized partial transport.
    #[command(subcommand)]
    Sp2ot(Sp2otCmd),
    /// kNN affinity graphs.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Synthetic imbalanced clustering.
    #[command(subcommand)]
    Cluster(ClusterCmd),
    /// Clustering metrics.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Cross-checks against the slow reference solvers.
    #[command(subcommand)]
    Oracle(OracleCmd),
}

#[derive(Args)]
struct SolveFlags {
    /// Prediction matrix (CSV or binary), rows are samples.
    #[arg(long)]
    pred: PathBuf,
    /// JSON config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rho: Option<f64>,
    /// Entropic weight.
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

impl SolveFlags {
    fn overrides(&self, lambda: Option<KlWeight>) -> SolveOverrides {
        SolveOverrides { rho: self.rho, lambda, eps: self.eps, tol: self.tol, max_iter: self.max_iter }
    }
}

#[derive(Subcommand)]
enum P2otCmd {
    /// Solve one instance.
    Solve {
        #[command(flatten)]
        flags: SolveFlags,
        /// Cluster-size KL weight, or `inf` for exact columns.
        #[arg(long)]
        lambda: Option<KlWeight>,
        /// Plan output; `.bin` selects the binary format.
        #[arg(long)]
        out: PathBuf,
        /// Summary JSON (default: next to the plan).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Time the fast solver against the generalized scaling baseline.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Sp2otCmd {
    Solve {
        #[command(flatten)]
        flags: SolveFlags,
        /// Affinity graph as `i,j,value` triplets.
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<KlWeight>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum KernelArg {
    Gaussian,
    Cosine,
}

#[derive(Subcommand)]
enum GraphCmd {
    Build {
        /// Feature matrix, rows are samples.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        kernel: Option<KernelArg>,
        /// Gaussian bandwidth; the median pairwise distance when omitted.
        #[arg(long)]
        sigma: Option<f64>,
        /// Ground-truth labels for reporting neighbor agreement.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ClusterCmd {
    /// Train once and record the history.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Sweep solvers over seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Score predicted cluster labels against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        n_classes: Option<usize>,
        /// JSON report; a CSV row is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum OracleCmd {
    /// Fast solver vs projected-gradient oracle on a small P2OT instance.
    Check {
        #[command(flatten)]
        flags: SolveFlags,
        #[arg(long)]
        lambda: Option<KlWeight>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Status {
    Ok(Outcome),
    Disagree(Outcome),
}

fn run(cli: Cli) -> Result<Status> {
    let ok = |o| Ok(Status::Ok(o));
    match cli.command {
        Command::P2ot(P2otCmd::Solve { flags, lambda, out, summary }) => ok(commands::p2ot_solve(
            &flags.pred,
            flags.config.as_deref(),
            &flags.overrides(lambda),
            &out,
            summary.as_deref(),
        )?),
        Command::P2ot(P2otCmd::Bench { config, out }) => ok(commands::p2ot_bench(config.as_deref(), &out)?),
        Command::Sp2ot(Sp2otCmd::Solve { flags, graph, lambda1, lambda2, out, summary }) => ok(commands::sp2ot_solve(
            &flags.pred,
            &graph,
            flags.config.as_deref(),
            lambda1,
            &flags.overrides(lambda2),
            &out,
            summary.as_deref(),
        )?),
        Command::Graph(GraphCmd::Build { features, config, k, kernel, sigma, labels, out }) => {
            let kernel = match (kernel, sigma) {
                (Some(KernelArg::Cosine), Some(_)) => anyhow::bail!("--sigma only applies to the gaussian kernel"),
                (Some(KernelArg::Cosine), None) => Some(KernelChoice::Cosine),
                (Some(KernelArg::Gaussian) | None, Some(s)) => Some(KernelChoice::Gaussian { sigma: Sigma::Value(s) }),
                (Some(KernelArg::Gaussian), None) => Some(KernelChoice::Gaussian { sigma: Sigma::Median }),
                (None, None) => None,
            };
            ok(commands::graph_build(&features, config.as_deref(), k, kernel, labels.as_deref(), &out)?)
        }
        Command::Cluster(ClusterCmd::Run { config, out_dir }) => ok(commands::cluster_run(&config, &out_dir)?),
        Command::Cluster(ClusterCmd::Ablate { config, out_dir }) => ok(commands::cluster_ablate(&config, &out_dir)?),
        Command::Metrics(MetricsCmd::Eval { pred, truth, n_classes, out }) => {
            ok(commands::metrics_eval(&pred, &truth, n_classes, &out)?)
        }
        Command::Oracle(OracleCmd::Check { flags, lambda, out }) => {
            let (o, agree) = commands::oracle_check(&flags.pred, flags.config.as_deref(), &flags.overrides(lambda), &out)?;
            Ok(if agree { Status::Ok(o) } else { Status::Disagree(o) })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let strict = cli.strict;

    // Under --strict, non-convergence must leave no artifacts, so the
    // commands stage their outputs and only commit when allowed.
    commands::set_strict(strict);
    match run(cli) {
        Ok(Status::Ok(o)) => {
            for p in &o.written {
                println!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Ok(Status::Disagree(o)) => {
            for p in &o.written {
                println!("wrote {}", p.display());
            }
            eprintln!("error: solver and oracle disagree");
            ExitCode::from(1)
        }
        Err(e) if e.downcast_ref::<commands::Unconverged>().is_some() => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
