use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nmrl_cli::error::EXIT_REJECTED;
use nmrl_cli::output::{resolve_out_dir, RunStatus};
use nmrl_cli::{report, run, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "nmrl", version, about = "Q-learning under non-Markovian observations: experiments and reports")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the analyses named in a config file.
    Run {
        config: PathBuf,
        /// Use this many consecutive seeds instead of the configured list.
        #[arg(long)]
        seeds: Option<usize>,
        /// Output directory; overrides NMRL_OUT_DIR and the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for seed-parallel work.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Summarize a finished run and write plot data.
    Report { run_dir: PathBuf },
}

fn exec(cli: Cli) -> CliResult<i32> {
    match cli.cmd {
        Cmd::Run { config, seeds, out, threads } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(n) = seeds {
                cfg = cfg.with_seed_count(n)?;
            }
            let dir = resolve_out_dir(out, cfg.out.clone())?;
            let outcome = run::run(&cfg, &dir, threads)?;
            println!("wrote {} files to {}", outcome.manifest.files.len(), dir.display());
            if outcome.manifest.status == RunStatus::Partial {
                for r in &outcome.manifest.rejections {
                    eprintln!("rejected {}: {}", r.analysis, r.message);
                }
                return Ok(EXIT_REJECTED);
            }
            Ok(0)
        }
        Cmd::Report { run_dir } => {
            let (_, text) = report::report(&run_dir)?;
            print!("{text}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match exec(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
