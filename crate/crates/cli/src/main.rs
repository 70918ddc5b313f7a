//! Command-line front end: train teachers, synthesize image batches in all
//! modes, score image sets, and run the distillation/pruning/from-scratch
//! applications, with reproducible artifacts for every run.

mod commands;
mod config;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "classinv",
    version,
    about = "Data-free image synthesis from trained classifiers, with evaluation and compression harnesses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a small BN-equipped classifier on the shipped corpus and save a
    /// checkpoint plus dataset archives.
    TrainTeacher(commands::train_teacher::TrainTeacherArgs),
    /// Synthesize image batches from a frozen teacher.
    Invert(commands::invert::InvertArgs),
    /// Score a synthesized set against a real set under one or more
    /// embedding classifiers.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Run a downstream application: distill | prune | prune-sweep | scratch.
    Apps(commands::apps::AppsArgs),
    /// Run all three synthesis modes with matched budgets and export aligned
    /// loss traces.
    LossCompare(commands::loss_compare::LossCompareArgs),
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainTeacher(args) => commands::train_teacher::run(args),
        Command::Invert(args) => commands::invert::run(args),
        Command::Evaluate(args) => commands::evaluate::run(args),
        Command::Apps(args) => commands::apps::run(args),
        Command::LossCompare(args) => commands::loss_compare::run(args),
    }
}

/// Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<classinv::Error>() {
        Some(classinv::Error::Numerical(_)) => 3,
        _ => 2,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
