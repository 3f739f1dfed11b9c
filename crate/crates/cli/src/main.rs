use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use imr_cli::apps::AppKind;
use imr_cli::compare::compare_runs;
use imr_cli::datagen::{gen_data, gen_delta, DataParams, DeltaParams};
use imr_cli::runner::{compact_all, list_checkpoints, run, RunArgs};
use imr_cli::text::{dump, import, TextFormat};

#[derive(Parser, Debug)]
#[command(name = "imr", version, about = "Incremental iterative MapReduce")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic input.
    GenData {
        #[arg(long, value_enum)]
        app: AppKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataParams,
    },
    /// Generate a seeded delta against a generated input. Writes
    /// `OUT/delta.run` and the updated input under `OUT/updated`.
    GenDelta {
        #[arg(long, value_enum)]
        app: AppKind,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fraction of base records to touch.
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Distinguishes the map keys of successive deltas.
        #[arg(long, default_value_t = 0)]
        epoch: u32,
        #[arg(long)]
        insert_only: bool,
        #[command(flatten)]
        data: DataParams,
    },
    /// Run a job.
    Run(Box<RunArgs>),
    /// Compare the output of a candidate run against an oracle run.
    Compare {
        candidate: PathBuf,
        oracle: PathBuf,
        /// Largest acceptable mean relative error.
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
    },
    /// Compact every MRBGraph store under a working directory.
    Compact {
        #[arg(long, env = "IMR_WORKDIR")]
        workdir: PathBuf,
    },
    /// List the checkpoints of an iterative job and verify them.
    CheckpointLs {
        #[arg(long, env = "IMR_WORKDIR")]
        workdir: PathBuf,
    },
    /// Convert a text file into a run.
    Import {
        #[arg(long, value_enum)]
        format: TextFormat,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a run file, or every run in a directory.
    Dump { path: PathBuf },
}

fn execute(command: Command, stdout: &mut impl Write) -> anyhow::Result<ExitCode> {
    match command {
        Command::GenData { app, out, seed, data } => {
            let s = gen_data(app, &data, seed, &out)?;
            writeln!(stdout, "{} records in {} files under {}", s.records, s.files.len(), out.display())?;
        }
        Command::GenDelta {
            app,
            base,
            out,
            fraction,
            seed,
            epoch,
            insert_only,
            data,
        } => {
            let d = DeltaParams {
                fraction,
                seed,
                epoch,
                insert_only,
            };
            let s = gen_delta(app, &base, &d, &data, &out)?;
            writeln!(
                stdout,
                "touched {}: {} deletes, {} updates, {} inserts; delta {}, updated input {}",
                s.touched,
                s.deletes,
                s.updates,
                s.inserts,
                s.delta.display(),
                s.updated.display()
            )?;
        }
        Command::Run(args) => {
            let outcome = run(&args)?;
            for line in &outcome.summary {
                writeln!(stdout, "{line}")?;
            }
            for path in &outcome.outputs {
                writeln!(stdout, "output {}", path.display())?;
            }
        }
        Command::Compare { candidate, oracle, tol } => {
            let c = compare_runs(&candidate, &oracle)?;
            write!(stdout, "{c}")?;
            let pass = c.passes(tol);
            writeln!(stdout, "verdict: {}", if pass { "PASS" } else { "FAIL" })?;
            if !pass {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Compact { workdir } => {
            let reports = compact_all(&workdir)?;
            if reports.is_empty() {
                writeln!(stdout, "no MRBGraph stores under {}", workdir.display())?;
            }
            for (dir, r) in reports {
                writeln!(
                    stdout,
                    "{}: {} chunks, {} -> {} bytes",
                    dir.display(),
                    r.chunks,
                    r.bytes_before,
                    r.bytes_after
                )?;
            }
        }
        Command::CheckpointLs { workdir } => {
            let mut bad = false;
            for c in list_checkpoints(&workdir)? {
                match c.problem {
                    None => writeln!(stdout, "iteration {}: ok, {} bytes", c.iteration, c.bytes)?,
                    Some(p) => {
                        bad = true;
                        writeln!(stdout, "iteration {}: invalid: {p}", c.iteration)?;
                    }
                }
            }
            if bad {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Import { format, input, out } => {
            let n = import(&input, format, &out)?;
            writeln!(stdout, "{n} records written to {}", out.display())?;
        }
        Command::Dump { path } => write!(stdout, "{}", dump(&path)?)?,
    }
    stdout.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.downcast_ref::<std::io::Error>()
        .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command, &mut std::io::stdout().lock()) {
        Ok(code) => code,
        // The reader went away, as with `imr dump ... | head`.
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
