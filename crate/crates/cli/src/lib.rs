//! Command-line front end for the `privacyface` library.
//!
//! Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.

pub mod commands;
pub mod config;
pub mod embeddings;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use privacyface::Exec;

use crate::config::{ConfigError, Settings};
use crate::embeddings::EmbeddingsError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Embeddings(#[from] EmbeddingsError),
    #[error(transparent)]
    Core(#[from] privacyface::Error),
    #[error("cannot write {0}: {1}")]
    Io(String, std::io::Error),
    #[error("{0}")]
    CheckFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(ConfigError::Read { .. }) => 3,
            CliError::Config(_) | CliError::Invalid(_) => 2,
            CliError::Embeddings(EmbeddingsError::Malformed { .. }) => 2,
            CliError::Embeddings(EmbeddingsError::Io { .. }) => 3,
            CliError::Core(_) | CliError::Io(..) | CliError::CheckFailed(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "privacyface", version, about = "Differentially private local clustering and federated training on the unit sphere")]
pub struct Cli {
    /// Settings file (`section.key = value` lines or `[section]` blocks).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set dplc.rho=1.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $PRIVACYFACE_OUT, then `out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Shortcuts for the most common DPLC settings.
#[derive(Debug, Args)]
pub struct DplcFlags {
    /// Cap half-angle (`dplc.rho`).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Per-query ε (`dplc.epsilon`).
    #[arg(long)]
    pub eps: Option<f64>,
    /// Per-query δ (`dplc.delta`).
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Noise scales under the tight, weak and naive sensitivity bounds.
    Calibrate {
        /// Cluster size |S| (default: `dplc.min_cluster_size`).
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        dplc: DplcFlags,
    },
    /// Cap occupancy ratio curves as CSV.
    Occupancy {
        /// Dimension; repeat for several curves.
        #[arg(long = "d", default_values_t = [512])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0.8)]
        rho_min: f64,
        #[arg(long, default_value_t = 1.57)]
        rho_max: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Cluster an embeddings file and release the cluster directions.
    Cluster {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        client: usize,
        #[arg(long, default_value_t = 0)]
        round: usize,
        #[command(flatten)]
        dplc: DplcFlags,
    },
    /// Run a federated simulation on synthetic clients.
    Simulate {
        /// phi, phi-p, phi-hat or naive (`federation.mode`).
        #[arg(long)]
        mode: Option<String>,
        /// `federation.rounds`.
        #[arg(long)]
        rounds: Option<usize>,
        /// Also write final class centers and identity centroids as CSV.
        #[arg(long)]
        export_embeddings: bool,
        #[command(flatten)]
        dplc: DplcFlags,
    },
    /// Nearest-neighbour identification of exposed vectors against a gallery.
    Attack {
        #[arg(long)]
        exposed: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long = "k", default_values_t = [1, 5, 10])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 1)]
        samples_per_identity: usize,
    },
    /// Finite-difference check of the loss gradients.
    Gradcheck {
        #[arg(long, default_value_t = 50)]
        instances: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
    },
}

fn apply_dplc_flags(s: &mut Settings, f: &DplcFlags) {
    for (key, v) in [("dplc.rho", f.rho), ("dplc.epsilon", f.eps), ("dplc.delta", f.delta)] {
        if let Some(v) = v {
            s.set(key, toml::Value::Float(v));
        }
    }
}

/// File settings, then `--set`, then dedicated flags.
pub fn resolve_settings(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = match &cli.config {
        Some(p) => Settings::from_file(p)?,
        None => Settings::default(),
    };
    for a in &cli.set {
        s.set_assignment(a)?;
    }
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::Invalid(format!("--seed {seed} is too large")))?;
        s.set("seed", toml::Value::Integer(seed));
    }
    if let Some(out) = &cli.out {
        s.set("output", toml::Value::String(out.display().to_string()));
    }
    match &cli.command {
        Command::Calibrate { dplc, .. } | Command::Cluster { dplc, .. } => apply_dplc_flags(&mut s, dplc),
        Command::Simulate { mode, rounds, dplc, .. } => {
            apply_dplc_flags(&mut s, dplc);
            if let Some(m) = mode {
                s.set("federation.mode", toml::Value::String(m.clone()));
            }
            if let Some(r) = rounds {
                s.set("federation.rounds", toml::Value::Integer(*r as i64));
            }
        }
        _ => {}
    }
    Ok(s)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_settings(&cli)?.resolve()?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match cli.command {
        Command::Calibrate { size, .. } => {
            let params = commands::CalibrateParams { size: size.unwrap_or(cfg.federation.dplc.min_cluster_size) };
            let (_, result) = commands::calibrate(&cfg, &params)?;
            commands::print_json(&result);
        }
        Command::Occupancy { dims, rho_min, rho_max, steps } => {
            commands::occupancy(&cfg, &commands::OccupancyParams { dims, rho_min, rho_max, steps })?;
        }
        Command::Cluster { input, client, round, .. } => {
            commands::cluster(&cfg, &commands::ClusterParams { input, client, round }, exec)?;
        }
        Command::Simulate { export_embeddings, .. } => {
            commands::simulate(&cfg, &commands::SimulateParams { export_embeddings }, exec)?;
        }
        Command::Attack { exposed, gallery, k, samples_per_identity } => {
            let params = commands::AttackParams { exposed, gallery, k, samples_per_identity };
            let (_, result) = commands::attack(&cfg, &params, exec)?;
            commands::print_json(&result);
        }
        Command::Gradcheck { instances, classes, dim, batch, clusters, step, tolerance } => {
            let params = commands::GradcheckParams { instances, classes, dim, batch, clusters, step, tolerance };
            let (_, result) = commands::gradcheck(&cfg, &params)?;
            commands::print_json(&result);
            if !result.passed {
                return Err(CliError::CheckFailed(format!(
                    "max relative error {:.3e} exceeds {:.1e}",
                    result.max_relative_error, params.tolerance
                )));
            }
        }
    }
    Ok(())
}
