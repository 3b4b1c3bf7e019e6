//! `coreg`: phantom synthesis, training, registration, evaluation, gradient
//! verification, and attention export over the RVOL1 and checkpoint formats.
//!
//! Exit codes: 0 success, 2 usage, 3 data/format, 4 numeric failure.

mod commands;
mod common;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "coreg", version, about = "Co-attention guided deformable 3D registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cardiac phantom cases with ground-truth flow.
    Synth(commands::synth::SynthArgs),
    /// Train registration weights on a synthesized dataset.
    Train(commands::train::TrainArgs),
    /// Warp a moving volume onto a fixed volume with a checkpoint.
    Register(commands::register::RegisterArgs),
    /// Register every case in a dataset and write a metrics report.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Verify every backward pass against finite differences.
    Gradcheck(commands::gradcheck::GradcheckArgs),
    /// Export co-attention gates, projections, and blend factors.
    DumpAttention(commands::dump_attention::DumpAttentionArgs),
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => commands::synth::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Register(args) => commands::register::run(args),
        Command::Evaluate(args) => commands::evaluate::run(args),
        Command::Gradcheck(args) => commands::gradcheck::run(args),
        Command::DumpAttention(args) => commands::dump_attention::run(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
