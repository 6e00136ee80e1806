mod commands;
mod config;
mod failure;
mod output;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

/// Saliency-based feature selection.
///
/// Exit status: 0 on success, 1 for invalid flags, config or inputs, 2 for numeric failures.
#[derive(Parser)]
#[command(name = "sfs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with known relevant features (CSV plus mask sidecar)
    Gen(commands::GenArgs),
    /// Rank the features of a dataset by iterated saliency
    Rank(commands::RankArgs),
    /// Score a classifier on growing prefixes of a ranking
    Eval(commands::EvalArgs),
    /// Push samples of a trained classifier toward a target class
    Adv(commands::AdvArgs),
    /// Compare reverse-mode gradients with finite differences
    Gradcheck(commands::GradcheckArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.render().to_string();
            let line = rendered.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("sfs: {}", line.trim_start_matches("error: "));
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Rank(a) => commands::rank_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Adv(a) => commands::adv_cmd(a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sfs: {f}");
            f.exit_code()
        }
    }
}
