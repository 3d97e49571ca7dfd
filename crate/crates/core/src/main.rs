//! Command-line experiment runner.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sage_lab::config::ExperimentConfig;
use sage_lab::error::Error;
use sage_lab::runner::{run_experiment, run_passk, run_sweep, run_verify};

#[derive(Parser)]
#[command(
    name = "sage-lab",
    about = "Desk-scale laboratory for KL-anchor-shaped RLVR on enumerable token trees",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training experiment from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run the configured (tau, gamma, seed) grid in parallel.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run a verifier battery and write its JSON report.
    Verify {
        /// One of: toy, expansion, offtarget, preservation, identities, all.
        selector: String,
        /// Randomized-instance count (minimums per battery still apply).
        #[arg(long, default_value_t = 0)]
        instances: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Shorthand for `verify toy`.
    Toy {
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Batch pass@k over a grades file of `problem_id, n, c` lines.
    Passk {
        #[arg(long)]
        grades: PathBuf,
        /// Comma-separated sample budgets, e.g. `1,8,64`.
        #[arg(long, default_value = "1")]
        ks: String,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out_dir,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            run_experiment(&cfg, seed, &out_dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            out_dir,
            jobs,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            run_sweep(&cfg, &out_dir, jobs)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            selector,
            instances,
            seed,
            out_dir,
        } => run_verify_to_dir(&selector, instances, seed, &out_dir),
        Command::Toy { out_dir } => run_verify_to_dir("toy", 0, 7, &out_dir),
        Command::Passk {
            grades,
            ks,
            out_dir,
        } => {
            let ks: Vec<u64> = ks
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("invalid k value `{s}`")))
                })
                .collect::<Result<_, _>>()?;
            let text = std::fs::read_to_string(&grades)?;
            let table = run_passk(&text, &ks)?;
            print!("{table}");
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("passk.csv"), table)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_verify_to_dir(
    selector: &str,
    instances: usize,
    seed: u64,
    out_dir: &std::path::Path,
) -> Result<ExitCode, Error> {
    let outcome = run_verify(selector, instances, seed)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join(format!("verify_{selector}.json"));
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&outcome.report).map_err(|e| Error::Serde(e.to_string()))?,
    )?;
    if outcome.passed {
        println!("verify {selector}: pass (report at {})", path.display());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("verify {selector}: FAIL (report at {})", path.display());
        Ok(ExitCode::from(1))
    }
}
