//! Thin command-line front end. Exit codes: 0 success, 1 usage or
//! configuration error, 2 runtime numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use odis::cli::{self, EvalRequest};
use odis::error::OdisError;
use odis::workers::Workers;

#[derive(Parser)]
#[command(name = "odis", version, about = "Object-level self-distillation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-object dataset with instance masks.
    GenData(GenDataArgs),
    /// Train a teacher-student pair per a run configuration.
    Train(TrainArgs),
    /// Evaluate a frozen checkpoint (k-NN, linear probe, or dense retrieval).
    Eval(EvalArgs),
    /// Finite-difference verification of every gradient, then the full loss.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Scene spec file (flat key = value); defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// knn | linear | dense
    #[arg(long)]
    protocol: String,
    /// Provide ground-truth object masks at inference time.
    #[arg(long, default_value_t = false)]
    use_masks: bool,
    #[arg(long)]
    dataset: PathBuf,
    /// Results file; one JSON record per line is appended.
    #[arg(long)]
    out: PathBuf,
    /// Optional run configuration for protocol knobs.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Coordinates probed per parameter tensor in the full-loss check.
    #[arg(long, default_value_t = 40)]
    full_loss_coords: usize,
    /// Deliberately tamper one primitive's adjoint (negative control).
    #[arg(long)]
    corrupt: Option<String>,
}

fn exit_code_for(err: &OdisError) -> u8 {
    match err {
        OdisError::NonFinite { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // keep clap's rendering but pin the usage exit code
            let is_help = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let _ = e.print();
            return if is_help { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let workers = Workers::from_env();

    let result: Result<u8, OdisError> = match cli.command {
        Command::GenData(a) => cli::cmd_gen_data(a.spec.as_deref(), &a.out, a.count, a.seed, &workers)
            .map(|m| {
                println!("wrote {} samples to {}", m.records.len(), a.out.display());
                0
            }),
        Command::Train(a) => {
            cli::cmd_train(&a.config, &a.out, a.resume.as_deref(), &workers).map(|outcome| {
                println!("final checkpoint: {}", outcome.final_checkpoint.display());
                if let Some(loss) = outcome.last_loss {
                    println!(
                        "last step loss: total {:.6} (obj {:.6}, patch {:.6}, img {:.6})",
                        loss.total, loss.l_obj, loss.l_patch, loss.l_img
                    );
                }
                0
            })
        }
        Command::Eval(a) => {
            let req = EvalRequest {
                checkpoint: &a.checkpoint,
                protocol: &a.protocol,
                use_masks: a.use_masks,
                dataset: &a.dataset,
                out: &a.out,
                config: a.config.as_deref(),
            };
            cli::cmd_eval(&req, &workers).map(|records| {
                for r in &records {
                    println!("{r}");
                }
                0
            })
        }
        Command::GradCheck(a) => {
            cli::cmd_grad_check(a.corrupt.as_deref(), a.full_loss_coords).map(|outcome| {
                let mut stdout = std::io::stdout();
                let _ = cli::print_grad_report(&mut stdout, &outcome);
                if outcome.passed {
                    0
                } else {
                    2
                }
            })
        }
    };

    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
