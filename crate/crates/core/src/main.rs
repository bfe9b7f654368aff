use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use lcfed::harness::{cost_report, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "lcfed", version, about = "Clustered federated learning simulator")]
struct Cli {
    /// Caps worker threads.
    #[arg(long, env = "LCFED_THREADS", global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, strategy) pair in a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `out` key.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print per-round clustering compute and communication costs.
    CostReport {
        /// Extra scale: device count (requires --k).
        #[arg(long)]
        m: Option<u64>,
        /// Extra scale: cluster count (requires --m).
        #[arg(long)]
        k: Option<u64>,
        /// Model dimension.
        #[arg(long, default_value_t = 4_800_000)]
        dim: u64,
        /// Low-rank dimension.
        #[arg(long, default_value_t = 50)]
        d: u64,
        /// Size of the decision block; the embedding is `dim - head_dim`.
        #[arg(long, default_value_t = 850)]
        head_dim: u64,
        #[arg(long, default_value_t = 4)]
        bytes_per_scalar: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("LCFED_THREADS must be at least 1");
        }
        lcfed::par::configure_threads(n).map_err(anyhow::Error::msg)?;
    }

    match cli.command {
        Command::Run { config, out } => {
            let cfg =
                ExperimentConfig::load(&config).with_context(|| format!("loading config {}", config.display()))?;
            let Some(out_dir) = out.or_else(|| cfg.out_dir.clone()) else {
                bail!("no output directory: pass --out or set `out` in the config");
            };
            let summary = run_experiment(&cfg, &out_dir)?;
            for s in &summary.strategies {
                let ari = s.mean_ari.map(|a| format!(" ari {a:.3}")).unwrap_or_default();
                println!("{:<9} acc {:.4} +/- {:.4}{ari}", s.strategy, s.mean_acc, s.std_acc);
            }
            println!("wrote {}", out_dir.display());
        }
        Command::CostReport {
            m,
            k,
            dim,
            d,
            head_dim,
            bytes_per_scalar,
        } => {
            let extra = match (m, k) {
                (Some(m), Some(k)) => vec![(m, k)],
                (None, None) => Vec::new(),
                _ => bail!("--m and --k must be given together"),
            };
            if dim == 0 || d == 0 || bytes_per_scalar == 0 || extra.iter().any(|&(m, k)| m == 0 || k == 0) {
                bail!("cost-report arguments must be positive");
            }
            let phi_dim = dim.saturating_sub(head_dim).max(1);
            print!("{}", cost_report(dim, phi_dim, d, bytes_per_scalar, &extra).render());
        }
    }
    Ok(())
}
