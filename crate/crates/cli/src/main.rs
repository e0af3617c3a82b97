use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod failure;
mod output;

use failure::Failure;

/// Anchor-pyramid crowd localization toolkit.
#[derive(Debug, Parser)]
#[command(name = "crowdloc", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Learn per-level anchor layouts from annotation files with k-means.
    LearnPriors(commands::LearnPriorsArgs),
    /// Score predicted points against annotations.
    Evaluate(commands::EvaluateArgs),
    /// Run the two-stage candidate matching on a candidate dump.
    MatchDemo(commands::MatchDemoArgs),
    /// Train the toy predictor on a synthetic scene and write its trace.
    Simulate(commands::SimulateArgs),
    /// Compare counting-loss gradients against finite differences.
    GradCheck(commands::GradCheckArgs),
}

fn run(cli: Cli) -> Result<String, Failure> {
    match cli.command {
        Command::LearnPriors(args) => commands::learn_priors(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::MatchDemo(args) => commands::match_demo(args),
        Command::Simulate(args) => commands::simulate(args),
        Command::GradCheck(args) => commands::grad_check(args),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(failure::USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
