mod args;
mod commands;
mod io;

use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;

use args::{Cli, Command};
use io::RunManifest;

fn dispatch(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::Train(a) => commands::train(a, argv),
        Command::Export(a) => commands::export(a, argv),
        Command::FitNac(a) => commands::fit_nac(a, argv),
        Command::EvalDetect(a) => commands::eval_detect(a, argv),
        Command::EvalMe(a) => commands::eval_me(a, argv),
        Command::Sweep(a) => commands::run_sweep(a, argv),
        Command::Plot(a) => commands::plot(a, argv),
        Command::Replay(a) => {
            let text = std::fs::read_to_string(&a.manifest)
                .with_context(|| format!("reading {}", a.manifest.display()))?;
            let manifest: RunManifest = serde_json::from_str(&text)?;
            let mut args = manifest.args.clone();
            if let Some(out) = &a.out {
                let out = out.display().to_string();
                let pos = args
                    .iter()
                    .position(|s| s == "--out")
                    .context("recorded command has no --out")?;
                args[pos + 1] = out;
            }
            let replayed = Cli::try_parse_from(
                std::iter::once("nac".to_string()).chain(args.iter().cloned()),
            )?;
            if matches!(replayed.command, Command::Replay(_)) {
                bail!("refusing to replay a replay");
            }
            dispatch(&replayed, &args)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
