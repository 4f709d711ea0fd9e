mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use dice_core::ipd::BaselineMode;
use dice_core::lola::{LolaConfig, Method};

#[derive(Parser, Debug)]
#[command(name = "dice", version, about = "Higher-order score-function estimators: checks and IPD experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Master seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config file (key = value lines plus a [lola] section).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for JSON and CSV reports.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads. DICE_THREADS takes precedence when set.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Exact derivatives of the single-Bernoulli toy by enumeration.
    VerifyToy {
        #[arg(long, default_value_t = 0.5)]
        theta: f64,
    },
    /// Monte-Carlo gradient and Hessian of the IPD objective against the
    /// exact value function.
    VerifyIpd {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        baseline: Option<BaselineMode>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0.99, allow_hyphen_values = true)]
        min_grad_corr: f64,
        #[arg(long, default_value_t = 0.9, allow_hyphen_values = true)]
        min_hess_corr: f64,
    },
    /// Gradient correlation against sample size, with and without baseline.
    SweepBaseline {
        #[arg(long, value_delimiter = ',', default_values_t = vec![128, 1024, 8192, 65536])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![BaselineMode::None, BaselineMode::Tabular])]
        modes: Vec<BaselineMode>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Trains both agents on the IPD for several seeds.
    Train {
        #[arg(long, default_value_t = Method::LolaDice)]
        method: Method,
        #[arg(long)]
        lookahead: Option<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        /// Naive runs pass when the mean final return is at most this.
        #[arg(long, default_value_t = -1.8, allow_hyphen_values = true)]
        naive_max: f64,
        /// LOLA-DiCE runs pass when a majority of seeds end at or above this.
        #[arg(long, default_value_t = -1.5, allow_hyphen_values = true)]
        lola_min: f64,
    },
}

fn threads(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var("DICE_THREADS") {
        Ok(v) if !v.trim().is_empty() => {
            let n = v.trim().parse().with_context(|| format!("DICE_THREADS={v}"))?;
            Ok(Some(n))
        }
        _ => Ok(flag),
    }
}

fn base_config(g: &Global) -> Result<LolaConfig> {
    let mut cfg = match &g.config {
        Some(p) => dice_core::config::load_config(p)?,
        None => LolaConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.ipd.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = threads(cli.global.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = base_config(&cli.global)?;
    let report = match cli.command {
        Command::VerifyToy { theta } => commands::verify_toy(theta)?,
        Command::VerifyIpd {
            samples,
            baseline,
            horizon,
            min_grad_corr,
            min_hess_corr,
        } => {
            let mut ipd = cfg.ipd.clone();
            ipd.baseline = baseline.unwrap_or(ipd.baseline);
            ipd.horizon = horizon.unwrap_or(ipd.horizon);
            commands::verify_ipd(&ipd, samples, min_grad_corr, min_hess_corr)?
        }
        Command::SweepBaseline {
            sizes,
            seeds,
            modes,
            horizon,
        } => {
            let mut ipd = cfg.ipd.clone();
            ipd.horizon = horizon.unwrap_or(ipd.horizon);
            commands::sweep_baseline(&ipd, &modes, &sizes, seeds)?
        }
        Command::Train {
            method,
            lookahead,
            seeds,
            epochs,
            horizon,
            batch,
            naive_max,
            lola_min,
        } => {
            let mut c = cfg.clone();
            c.lookahead = lookahead.unwrap_or(c.lookahead);
            c.epochs = epochs.unwrap_or(c.epochs);
            c.ipd.horizon = horizon.unwrap_or(c.ipd.horizon);
            c.ipd.batch = batch.unwrap_or(c.ipd.batch);
            commands::train(method, &c, seeds, naive_max, lola_min)?
        }
    };
    let path = report.write(&cli.global.out_dir)?;
    print!("{}", report.summary());
    println!("  report: {}", path.display());
    Ok(report.pass)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
