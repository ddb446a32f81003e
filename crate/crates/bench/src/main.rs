use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use brdp_bench::config::{log_space, BetaGrid};
use brdp_bench::{run_experiment, ConfigError, ExperimentConfig, ExperimentId, RunError, SweepResult};

#[derive(Parser)]
#[command(name = "brdp", version, about = "Bounded-rational controllers under estimation noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a sweep with default settings.
    Sweep {
        #[arg(long)]
        experiment: String,
        /// Log-spaced grid `min:max:count`; β = ∞ is added for the quadrotor experiments.
        #[arg(long)]
        beta: Option<String>,
        /// Comma-separated σ² values.
        #[arg(long)]
        sigma: Option<String>,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn parse_beta(arg: &str) -> Result<BetaGrid, ConfigError> {
    let bad = || ConfigError::Invalid(format!("--beta expects min:max:count, got {arg:?}"));
    let parts: Vec<&str> = arg.split(':').collect();
    let [min, max, count] = parts[..] else { return Err(bad()) };
    let (min, max): (f64, f64) = (min.parse().map_err(|_| bad())?, max.parse().map_err(|_| bad())?);
    let count: usize = count.parse().map_err(|_| bad())?;
    Ok(BetaGrid { values: Some(log_space(min, max, count)), include_inf: None, ..Default::default() })
}

fn parse_sigma(arg: &str) -> Result<Vec<f64>, ConfigError> {
    arg.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| ConfigError::Invalid(format!("bad --sigma entry {s:?}"))))
        .collect()
}

fn set_threads(flag: Option<usize>) -> Result<(), ConfigError> {
    let from_env = match std::env::var("BRDP_THREADS") {
        Ok(v) => Some(v.parse::<usize>().map_err(|_| ConfigError::Invalid(format!("BRDP_THREADS={v:?} is not a count")))?),
        Err(_) => None,
    };
    if let Some(n) = from_env.or(flag) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| ConfigError::Invalid(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn print_table(res: &SweepResult) {
    println!("{:>12} {:>8} {:>14} {:>12} {:>8}  beta*", "beta", "sigma2", "mean_cost", "std_cost", "fail");
    for r in &res.rows {
        let star = if r.is_beta_star { "*" } else { "" };
        println!("{:>12.5e} {:>8.3} {:>14.6} {:>12.6} {:>8.4}  {star}", r.beta, r.sigma2, r.mean_cost, r.std_cost, r.failure_fraction);
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    let (cfg, out, threads) = match cli.command {
        Command::Run { config, out, threads, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            (cfg, out, threads)
        }
        Command::Sweep { experiment, beta, sigma, trials, seed, out, threads } => {
            let id = ExperimentId::parse(&experiment)?;
            let mut cfg = ExperimentConfig::defaults(id, seed, trials);
            if let Some(b) = beta {
                let mut grid = parse_beta(&b)?;
                grid.include_inf = Some(id != ExperimentId::DoubleSlit);
                cfg.beta = grid;
            }
            if let Some(s) = sigma {
                cfg.sigma2 = Some(parse_sigma(&s)?);
            }
            cfg.validate()?;
            (cfg, out, threads)
        }
    };
    set_threads(threads)?;
    let dir = out.or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out").join(cfg.experiment.as_str()));
    let res = run_experiment(&cfg, &dir)?;
    print_table(&res);
    eprintln!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
