//! Command-line front end for the spectral network pipeline.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use specnet::gradcheck::{run_gradcheck, GradcheckSizes, TOLERANCE};
use specnet::Error;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "specnet", version, about = "Spectral networks on graph-structured features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Experiment description (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the config
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the feature similarity graph
    EstimateGraph(Common),
    /// Eigendecompose the graph Laplacian
    BuildBasis(Common),
    /// Cluster the graph into a pooling hierarchy
    BuildHierarchy(Common),
    /// Train a network
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint directory
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation and test sets
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to the latest checkpoint in the run directory
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference check of every backward pass
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        nodes: usize,
        #[arg(long, default_value_t = 2)]
        in_maps: usize,
        #[arg(long, default_value_t = 3)]
        out_maps: usize,
        #[arg(long, default_value_t = 5)]
        n0: usize,
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("gradient check failed: {0}")]
    GradcheckFailed(String),
}

impl CliError {
    /// 0 success, 1 validation or configuration problem, 2 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            CliError::GradcheckFailed(_) => 2,
            _ => 1,
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

/// Runs one subcommand, returning the lines it reports on stdout.
pub fn run(cli: Cli) -> Result<Vec<String>, CliError> {
    let mut lines = Vec::new();
    match cli.command {
        Command::EstimateGraph(c) => {
            let cfg = load_config(&c)?;
            let path = pipeline::cmd_estimate_graph(&cfg, &c.out)?;
            lines.push(format!("wrote {}", path.display()));
        }
        Command::BuildBasis(c) => {
            load_config(&c)?;
            let dir = pipeline::cmd_build_basis(&c.out)?;
            lines.push(format!("wrote {}", dir.display()));
        }
        Command::BuildHierarchy(c) => {
            let cfg = load_config(&c)?;
            let dir = pipeline::cmd_build_hierarchy(&cfg, &c.out)?;
            lines.push(format!("wrote {}", dir.display()));
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common)?;
            let result = pipeline::cmd_train(&cfg, &common.out, resume.as_deref())?;
            match result.history.last() {
                Some(r) => lines.push(format!(
                    "epoch {}: train loss {:.6}, validation metric {:.6}",
                    r.epoch, r.train_loss, r.val_metric
                )),
                None => lines.push("no epochs run".into()),
            }
        }
        Command::Evaluate { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let rep = pipeline::cmd_evaluate(&cfg, &common.out, checkpoint.as_deref())?;
            let v = &rep.validation;
            lines.push(format!("validation {}: {:.6} (loss {:.6}, P_net {})", v.metric_name, v.metric, v.loss, v.p_net));
            if let Some(t) = &rep.test {
                lines.push(format!("test {}: {:.6} (loss {:.6})", t.metric_name, t.metric, t.loss));
            }
        }
        Command::Gradcheck { seed, nodes, in_maps, out_maps, n0, samples, corrupt } => {
            let sizes = GradcheckSizes { nodes, in_maps, out_maps, n0, samples };
            let results = run_gradcheck(seed, &sizes, corrupt.as_deref())?;
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.passed { "pass" } else { "FAIL" };
                lines.push(format!("{status} {:<24} rel error {:.3e}", r.name, r.rel_error));
                if !r.passed {
                    failed.push(r.name.clone());
                }
            }
            if !failed.is_empty() {
                for l in &lines {
                    println!("{l}");
                }
                return Err(CliError::GradcheckFailed(format!(
                    "{} exceeded tolerance {TOLERANCE:e}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(lines)
}
