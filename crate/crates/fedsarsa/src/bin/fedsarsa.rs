use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use fedsarsa::checks::verify_suite;
use fedsarsa::experiment::format_report;
use fedsarsa::{compute_reference, constants_report, run_suite, Experiment, RunConfig, RunError, RunOptions};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "fedsarsa", version, about = "Federated linear SARSA experiments")]
struct Cli {
    /// Worker threads (speed only; results are identical for any value)
    #[arg(long, global = true, env = "FEDSARSA_WORKERS", default_value_t = 1)]
    workers: usize,
    /// Replace the replication list with this single seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output CSV path (overrides output_path)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every replication and write the CSV run record
    Run { config: PathBuf },
    /// Compute and print the MSE reference parameter
    Reference { config: PathBuf },
    /// Solve fixed points and print the problem constants and bound report
    Constants { config: PathBuf },
    /// Run the acceptance checks on the configured instance
    Verify { config: PathBuf },
}

impl Command {
    fn config(&self) -> &PathBuf {
        match self {
            Command::Run { config }
            | Command::Reference { config }
            | Command::Constants { config }
            | Command::Verify { config } => config,
        }
    }
}

fn fail(err: &RunError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(EXIT_VALIDATION);
    }
    let path = cli.command.config();
    let mut cfg = match RunConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(EXIT_VALIDATION);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.replications = vec![seed];
    }
    let started = Instant::now();
    let result = fedsarsa::parallel::pool(cli.workers).install(|| execute(&cli, &cfg));
    eprintln!("elapsed: {:.3} s", started.elapsed().as_secs_f64());
    match result {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<ExitCode, RunError> {
    match cli.command {
        Command::Run { .. } => {
            let record = run_suite(
                cfg,
                &RunOptions {
                    workers: cli.workers,
                    out: cli.out.clone(),
                },
            )?;
            println!("config_hash = {}", record.config_hash);
            println!("rows = {}", record.rows);
            println!("csv = {}", record.csv_path.display());
            println!("meta = {}", record.meta_path.display());
            if let Some(p) = &record.summary_path {
                println!("summary = {}", p.display());
            }
            for r in &record.replications {
                println!("replication {} final_mse = {:.6e}", r.seed, r.final_mse);
            }
            if let Some(Err(reason)) = &record.constants {
                eprintln!("warning: constants report unavailable: {reason}");
            }
        }
        Command::Reference { .. } => {
            let exp = Experiment::build(cfg)?;
            let theta = compute_reference(cfg, &exp)?;
            println!("norm = {:.16e}", theta.norm());
            for (i, x) in theta.as_slice().iter().enumerate() {
                println!("theta[{i}] = {x:.16e}");
            }
        }
        Command::Constants { .. } => {
            let exp = Experiment::build(cfg)?;
            print!("{}", format_report(&constants_report(cfg, &exp)?));
        }
        Command::Verify { .. } => {
            let outcomes = verify_suite(cfg)?;
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
            if failed > 0 {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
