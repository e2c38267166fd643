use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use netem_core::harness::pipelines::{run_diagnose, run_mnist, MnistConfig};
use netem_core::harness::{run_experiment, summarize, ExperimentConfig, Profile};
use netem_core::partition::Regime;

#[derive(Parser)]
#[command(name = "netem", version, about = "Decentralized EM for Gaussian mixtures")]
struct Cli {
    /// Worker threads for replicates and clients (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a configuration for a profile as TOML.
    GenerateConfig {
        #[arg(long, default_value = "desk")]
        profile: Profile,
        #[arg(long)]
        seed: Option<u64>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the replication grid.
    Run {
        #[arg(long, conflicts_with = "profile")]
        config: Option<PathBuf>,
        #[arg(long)]
        profile: Option<Profile>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate a results directory into summary tables.
    Summarize {
        #[arg(long)]
        out: PathBuf,
    },
    /// Separation constants and network constants for each mean shift.
    Diagnose {
        #[arg(long, conflicts_with = "profile")]
        config: Option<PathBuf>,
        #[arg(long)]
        profile: Option<Profile>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20000)]
        n_eval: usize,
        #[arg(long, default_value_t = 100000)]
        n_mc: usize,
    },
    /// PCA-reduced MNIST clustering with MNEM against centralized EM.
    Mnist {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        heterogeneous: bool,
    },
}

fn load_config(config: Option<PathBuf>, profile: Option<Profile>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(path) => ExperimentConfig::load(&path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::profile(profile.unwrap_or(Profile::Desk)),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenerateConfig { profile, seed, out } => {
            let mut cfg = ExperimentConfig::profile(profile);
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let text = cfg.to_toml()?;
            match out {
                Some(path) => std::fs::write(&path, text)?,
                None => print!("{text}"),
            }
        }
        Command::Run {
            config,
            profile,
            seed,
            out,
        } => {
            let cfg = load_config(config, profile, seed)?;
            let outcome = run_experiment(&cfg, &out)?;
            let failed = outcome.failed_cells();
            println!("{} cells written to {}", outcome.cells.len(), out.display());
            if failed > 0 {
                eprintln!("{failed} cells had failed replicates; see errors.txt in each cell");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Summarize { out } => {
            let summary = summarize(&out)?;
            println!("{} curve points, {} final rows", summary.curves.len(), summary.finals.len());
            if summary.incomplete() > 0 {
                eprintln!("{} cells missing or partial; see summary/status.csv", summary.incomplete());
                return Ok(ExitCode::from(2));
            }
        }
        Command::Diagnose {
            config,
            profile,
            out,
            n_eval,
            n_mc,
        } => {
            let cfg = load_config(config, profile, None)?;
            let res = run_diagnose(&cfg, n_eval, n_mc, &out)?;
            println!(
                "network: se_w {:.4e} sigma_w {:.4} rho_w {:.4}",
                res.network.se_w, res.network.sigma_w, res.network.rho_w
            );
            for (shift, r) in &res.reports {
                println!(
                    "C={shift}: tau {:.4?} (se {:.1e}) norm {:.4} radius {:.4} semi ratio {}",
                    r.tau,
                    r.tau_std_err.iter().cloned().fold(0.0, f64::max),
                    r.mapping_norm,
                    r.spectral_radius,
                    r.semi_ratio.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Mnist {
            data,
            out,
            seed,
            clients,
            rounds,
            heterogeneous,
        } => {
            let mut cfg = MnistConfig::desk(data);
            cfg.out_dir = out;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = clients {
                cfg.clients = m;
            }
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            if heterogeneous {
                cfg.regime = Regime::Heterogeneous;
            }
            let r = run_mnist(&cfg)?;
            println!("PCA dimension {} (explained {:.3})", r.pca_dim, r.explained);
            println!("MNEM test Err {:.4} (per client {:?})", r.mnem_err, r.client_err);
            println!("centralized EM test Err {:.4}", r.em_err);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
