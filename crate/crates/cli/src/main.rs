use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use retrofeat::config::parse_assignment;
use retrofeat::report::{comparison_table, table_tsv};
use retrofeat::runner::{self, Executor, RunOutcome};
use retrofeat::{selftest, CliError, EXIT_CONFIG, EXIT_FAILURE, EXIT_OK};

#[derive(Parser)]
#[command(name = "retrofeat", version, about = "Non-exemplar class-incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Extra `key=value` assignments, applied after the file and
        /// environment.
        #[arg(long = "set", value_parser = parse_assignment)]
        sets: Vec<(String, String)>,
    },
    /// Run every cell of the config's `sweep.*` grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Parallel child processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Rebuild tables and plot files from the records under a directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn fail(e: CliError) -> i32 {
    eprintln!("error: {}", e);
    e.exit_code()
}

fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Run { config, out, seed, sets } => {
            let cfg = match runner::load_config(&config, &sets, seed) {
                Ok((_, cfg)) => cfg,
                Err(e) => return fail(e),
            };
            match runner::execute(&cfg, &sets, &out) {
                Ok(RunOutcome::Completed { record, dir }) => {
                    let m = record.metrics;
                    println!(
                        "{} seed {}: avg incremental {:.4}, final {:.4}, forgetting {}",
                        record.strategy,
                        record.seed,
                        m.average_incremental_accuracy,
                        m.final_accuracy,
                        m.average_forgetting.map_or_else(|| "-".into(), |f| format!("{:.4}", f))
                    );
                    println!("wrote {}", dir.display());
                    EXIT_OK
                }
                Ok(RunOutcome::Skipped { dir }) => {
                    println!("record already present in {}", dir.display());
                    EXIT_OK
                }
                Err(e) => fail(e),
            }
        }
        Command::Sweep { config, out, jobs } => {
            let exe = match std::env::current_exe() {
                Ok(p) => p,
                Err(e) => return fail(e.into()),
            };
            match runner::sweep(&config, &out, &Executor::Processes { exe, jobs }) {
                Ok(s) => {
                    print!("{}", table_tsv(&comparison_table(&s.records)));
                    if s.skipped > 0 {
                        println!("{} cells already had records", s.skipped);
                    }
                    for f in &s.failures {
                        eprintln!("failed: {}", f);
                    }
                    if s.failures.is_empty() {
                        EXIT_OK
                    } else {
                        EXIT_FAILURE
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { input } => match runner::report_dir(&input) {
            Ok((records, written)) => {
                print!("{}", table_tsv(&comparison_table(&records)));
                for p in written {
                    println!("wrote {}", p.display());
                }
                EXIT_OK
            }
            Err(e) => fail(e),
        },
        Command::Selftest => {
            let mut failed = 0;
            for (name, outcome) in selftest::run() {
                match outcome {
                    Ok(()) => println!("ok    {}", name),
                    Err(msg) => {
                        failed += 1;
                        println!("FAIL  {}: {}", name, msg);
                    }
                }
            }
            if failed == 0 {
                EXIT_OK
            } else {
                EXIT_FAILURE
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { EXIT_OK as u8 });
        }
    };
    ExitCode::from(run(cli) as u8)
}
