mod args;
mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, Parser};

use args::{Cli, Command};
use commands::Outcome;
use manifest::Run;

fn main() -> ExitCode {
    let raw: Vec<OsString> = std::env::args_os().collect();
    let argv = match config::merge_config(raw.clone()) {
        Ok(a) => a,
        Err(e) => Cli::command().error(ErrorKind::InvalidValue, format!("{e:#}")).exit(),
    };
    let cli = Cli::parse_from(argv);

    if let Command::Train(t) = &cli.command {
        if t.h == 0 || t.e % t.h != 0 {
            Cli::command()
                .error(
                    ErrorKind::ArgumentConflict,
                    format!("--e {} must be divisible by --h {}", t.e, t.h),
                )
                .exit();
        }
    }

    if cli.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }

    let mut run = Run::start();
    let outcome = commands::dispatch(&cli, &mut run);
    let (status, code) = match &outcome {
        Ok(Outcome::Done) => ("ok".to_string(), ExitCode::SUCCESS),
        Ok(Outcome::ThresholdExceeded(msg)) => {
            eprintln!("error: {msg}");
            (format!("failed: {msg}"), ExitCode::from(3))
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            (format!("error: {e:#}"), ExitCode::FAILURE)
        }
    };
    let config = serde_json::to_value(&cli).unwrap_or(serde_json::Value::Null);
    let argv: Vec<String> = raw.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let manifest = run.finish(cli.command.name(), argv, config, cli.seed, status);
    if let Err(e) = manifest.append_to(&cli.manifest) {
        eprintln!("error: writing manifest {}: {e}", cli.manifest.display());
        return ExitCode::FAILURE;
    }
    code
}
