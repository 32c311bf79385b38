use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pnde_cli::{preset, Run, RunConfig, RunError};
use pnde_core::Error;

#[derive(Parser)]
#[command(name = "pnde", version, about = "Projected neural ODE benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample initial conditions and integrate ground-truth datasets.
    Generate(Common),
    /// Pretrain once, then fine-tune every roster model.
    Train(Common),
    /// Roll out every model on the test set and write the reports.
    Evaluate(Common),
    /// Generate, train and evaluate, then apply the preset's checks.
    Repro(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: runs/<name>].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run on the calling thread only.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn run(&self) -> Result<Run, RunError> {
        let mut config = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => return Err(Error::Config("pass --config <path> or --preset <name>".into()).into()),
        };
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
        let mut run = Run::new(config, out);
        if self.sequential {
            run.parallelism = pnde_core::Parallelism::Sequential;
        }
        Ok(run)
    }
}

fn execute(cmd: &Command) -> Result<(), RunError> {
    match cmd {
        Command::Generate(c) => {
            let run = c.run()?;
            run.generate()?;
            println!("datasets written to {}", run.out.join("data").display());
        }
        Command::Train(c) => {
            let run = c.run()?;
            run.train()?;
            println!("checkpoints written to {}", run.out.join("models").display());
        }
        Command::Evaluate(c) => {
            let run = c.run()?;
            print!("{}", run.evaluate()?.summary_csv());
        }
        Command::Repro(c) => {
            let run = c.run()?;
            let outcome = run.repro();
            let checks = match &outcome {
                Ok(report) => &report.checks,
                Err(RunError::Acceptance(checks)) => checks,
                Err(_) => return outcome.map(|_| ()),
            };
            for c in checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            outcome?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
