use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flanp_cli::commands::{self, OracleOptions};
use flanp_cli::config::ExperimentConfig;
use flanp_cli::error::CliResult;

#[derive(Parser)]
#[command(name = "flanp", version, about = "Simulate federated learning with adaptive node participation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed and FLANP_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> CliResult<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        cfg.apply_seed_override(self.seed)?;
        let out = self.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run FLANP and the configured baselines, writing traces and a summary.
    Run(Common),
    /// Compare FLANP against each baseline, averaged over replicas.
    Compare(Common),
    /// Like compare, but requires at least one sweep axis.
    Sweep(Common),
    /// Check the order-statistics and harmonic-number identities.
    Oracle {
        /// Largest fleet size checked.
        #[arg(long, default_value_t = 64)]
        max_n: usize,
        /// Monte Carlo trials per fleet size.
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the synthetic dataset and speed file a config would generate.
    GenData(Common),
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Run(c) => {
            let (cfg, out) = c.load()?;
            let report = commands::cmd_run(&cfg, &out, c.jobs)?;
            println!("wrote {}", report.csv.display());
            println!("wrote {}", report.summary.display());
        }
        Command::Compare(c) => compare(&c, false)?,
        Command::Sweep(c) => compare(&c, true)?,
        Command::Oracle { max_n, trials, seed } => {
            let report = commands::cmd_oracle(OracleOptions { max_n, trials, seed })?;
            print!("{}", report.render());
            if !report.all_pass() {
                let failing: Vec<String> = report
                    .checks
                    .iter()
                    .filter(|c| !c.pass)
                    .map(|c| c.name.clone())
                    .collect();
                return Err(flanp_cli::error::CliError::runtime(format!(
                    "failing checks: {}",
                    failing.join(", ")
                )));
            }
        }
        Command::GenData(c) => {
            let (cfg, out) = c.load()?;
            let report = commands::cmd_gen_data(&cfg, &out)?;
            println!("wrote {}", report.data.display());
            println!("wrote {}", report.speeds.display());
        }
    }
    Ok(())
}

fn compare(c: &Common, require_sweep: bool) -> CliResult<()> {
    let (cfg, out) = c.load()?;
    let report = commands::cmd_compare(&cfg, &out, c.jobs, require_sweep)?;
    print!("{}", report.table);
    println!("(times in simulated units)");
    println!("wrote {}", report.csv.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("flanp: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
