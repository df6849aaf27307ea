use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fasten_cli::config;
use fasten_cli::report;
use fasten_cli::runner::{self, RunOptions};
use fasten_cli::verify;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "fasten", version, about = "Noisy-label training experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (sweep value, seed) combination of a config.
    Run {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
        /// Comma-separated seeds replacing the config's list.
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        /// Single-threaded, bitwise reproducible execution.
        #[arg(long)]
        strict: bool,
        /// Print the resolved plan and exit.
        #[arg(long)]
        dry_run: bool,
        /// Output root, overriding the config's `out_dir`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Summarize every run below a result directory.
    Report {
        #[arg(value_name = "RESULTS")]
        results: PathBuf,
        /// Where to write report.csv and report.txt (default: RESULTS).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run the acceptance suite.
    Verify {
        /// Scratch directory for the reproducibility check.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn threads_from_env() -> Result<Option<usize>, String> {
    match std::env::var("FASTEN_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(format!("FASTEN_THREADS must be a positive integer, got {v:?}")),
        },
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match cli.command {
        Command::Run {
            config,
            seed_override,
            strict,
            dry_run,
            out,
        } => run(&config, RunOptions {
            seed_override,
            strict,
            dry_run,
            out,
            threads,
        }),
        Command::Report { results, out } => report(&results, out.as_deref()),
        Command::Verify { out } => {
            if let Some(t) = threads {
                fasten_core::parallel::configure_threads(t);
            }
            let scratch = out.unwrap_or_else(|| std::env::temp_dir().join("fasten-verify"));
            let results = verify::run_all(&scratch, |r| println!("{}", r.line()));
            let passed = results.iter().filter(|r| r.passed).count();
            println!("{passed}/{} criteria passed", results.len());
            if passed == results.len() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_FAILURE)
            }
        }
    }
}

fn run(path: &Path, opts: RunOptions) -> ExitCode {
    let cfg = match config::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    match runner::execute(&cfg, &opts) {
        Ok(None) => ExitCode::SUCCESS,
        Ok(Some(report)) => {
            println!("results in {}", report.dir.display());
            let aborted = report.aborted();
            for o in &aborted {
                eprintln!(
                    "aborted {}: {}",
                    o.job.rel_dir.display(),
                    o.summary.error.as_deref().unwrap_or("unknown error")
                );
            }
            if aborted.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_NUMERIC)
            }
        }
        Err(runner::RunError::Setup(msg)) => {
            eprintln!("config error: {}: {msg}", path.display());
            ExitCode::from(EXIT_CONFIG)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn report(results: &Path, out: Option<&Path>) -> ExitCode {
    let collected = report::collect(results);
    let rows = report::build_table(&collected.summaries);
    let text = report::to_text(&rows, &collected.problems);
    print!("{text}");
    let dest = out.unwrap_or(results);
    let written = std::fs::create_dir_all(dest)
        .and_then(|_| std::fs::write(dest.join("report.csv"), report::to_csv(&rows)))
        .and_then(|_| std::fs::write(dest.join("report.txt"), &text));
    if let Err(e) = written {
        eprintln!("error: cannot write report to {}: {e}", dest.display());
        return ExitCode::from(EXIT_FAILURE);
    }
    for (p, why) in &collected.problems {
        eprintln!("skipped {}: {why}", p.display());
    }
    if rows.is_empty() {
        ExitCode::from(EXIT_FAILURE)
    } else {
        ExitCode::SUCCESS
    }
}
