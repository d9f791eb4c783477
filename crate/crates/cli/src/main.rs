mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;
use robometa::Error;

use args::{Cli, Command, SweepCommand};

fn configure_threads() -> robometa::Result<()> {
    let Ok(raw) = std::env::var("RM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("RM_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> robometa::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a, false),
        Command::Finetune(a) => commands::train(a, true),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(SweepCommand::ContextHorizon(a)) => commands::sweep_context_horizon(a),
        Command::Sweep(SweepCommand::Layers(a)) => commands::sweep_layers(a),
        Command::Compare(a) => commands::compare(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Simulate(a) => commands::simulate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let report = serde_json::json!({
                "error": category.as_str(),
                "message": e.to_string(),
            });
            eprintln!("{report}");
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
