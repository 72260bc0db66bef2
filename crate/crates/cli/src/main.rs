use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dntk_cli::{run_spec_file, RunOptions};

#[derive(Parser)]
#[command(name = "dntk", version, about = "Depth-induced tangent kernel experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON spec.
    Run {
        spec: PathBuf,
        /// Worker threads for parallel trials.
        #[arg(long)]
        jobs: Option<usize>,
        /// Base seed; overrides the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the spec.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run { spec, jobs, seed, out } = cli.command;
    let opts = RunOptions { jobs, seed, output_dir: out };
    match run_spec_file(&spec, &opts) {
        Ok(report) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if let Some(msg) = &report.numeric_failure {
                eprintln!("numeric failure: {msg}");
            }
            println!("results written to {}", report.output_dir.display());
            ExitCode::from(report.exit_code())
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
