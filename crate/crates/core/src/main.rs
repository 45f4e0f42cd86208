use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lease::harness::{compare_with_random, gamma_sweep, gradcheck, run_eval, run_search, RunConfig};
use lease::lease::Mode;
use lease::searchspace::Genotype;
use lease::Result;

/// Explainer-guided differentiable architecture search.
///
/// Log verbosity follows LEASE_LOG (error, warn, info, debug, trace;
/// default info).
#[derive(Parser)]
#[command(name = "lease", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a cell and write metrics.csv, genotype.txt and checkpoint.txt.
    Search {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Output directory (default: run.out_dir of the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain a genotype from scratch and report test accuracy (eval.csv).
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        genotype: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search and retrain once per tradeoff value (sweep.csv).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated tradeoff values, e.g. 0.1,0.5,1,2.
        #[arg(long, value_delimiter = ',', required = true)]
        gamma: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Searched genotypes against uniformly random ones over several seeds
    /// (compare.csv).
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient and hypergradient oracle suites.
    Gradcheck,
}

fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse().map_err(|e: lease::Error| e.to_string())
}

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Search { config, seed, mode, out } => {
            let mut cfg = load(&config, seed)?;
            if let Some(m) = mode {
                cfg.run.mode = m;
            }
            let dir = out.unwrap_or_else(|| cfg.run.out_dir.clone());
            let outcome = run_search(&cfg, Some(&dir))?;
            print!("{}", outcome.genotype.to_text());
            Ok(true)
        }
        Command::Eval { config, genotype, seed, out } => {
            let cfg = load(&config, seed)?;
            let g = Genotype::load(&genotype)?;
            let dir = out.unwrap_or_else(|| cfg.run.out_dir.clone());
            let outcome = run_eval(&cfg, &g, Some(&dir))?;
            println!("test_accuracy {}", outcome.test_accuracy);
            Ok(true)
        }
        Command::Sweep { config, gamma, out } => {
            let cfg = load(&config, None)?;
            let dir = out.unwrap_or_else(|| cfg.run.out_dir.clone());
            let rows = gamma_sweep(&cfg, &gamma, Some(&dir))?;
            for r in rows {
                println!("gamma {} test_error {}", r.gamma, r.test_error);
            }
            Ok(true)
        }
        Command::Compare { config, seeds, out } => {
            let cfg = load(&config, None)?;
            let dir = out.unwrap_or_else(|| cfg.run.out_dir.clone());
            let rows = compare_with_random(&cfg, seeds, Some(&dir))?;
            let mean = |f: fn(&lease::harness::ComparisonRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
            println!("searched_mean {}", mean(|r| r.searched_accuracy));
            println!("random_mean {}", mean(|r| r.random_accuracy));
            Ok(true)
        }
        Command::Gradcheck => {
            let checks = gradcheck::run_all()?;
            for c in &checks {
                println!("{c}");
            }
            Ok(checks.iter().all(|c| c.passed()))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LEASE_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
