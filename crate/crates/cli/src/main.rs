mod args;
mod commands;
mod config;

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::Result;
use clap::{ArgMatches, CommandFactory, FromArgMatches};
use serde::de::DeserializeOwned;
use serde::Serialize;

use args::{Cli, Command, CriseArgs, ReplayArgs};
use config::{merge_config, usage, ResolvedConfig, UsageError};

fn init_logging(level: log::LevelFilter) {
    env_logger::Builder::new()
        .filter_level(level)
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Stderr)
        .init();
}

fn with_config<T: Serialize + DeserializeOwned>(
    args: &T,
    file: Option<&Path>,
    matches: &ArgMatches,
    command: &str,
    exclusive: &[(&str, &str)],
) -> Result<T> {
    let sub = matches.subcommand_matches(command).expect("parsed subcommand");
    match file {
        Some(f) => merge_config(args, sub, f, command, exclusive),
        None => Ok(serde_json::from_value(serde_json::to_value(args)?)?),
    }
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let file = cli.config.as_deref();
    let name = cli.command.name();
    match &cli.command {
        Command::Mix(a) => commands::mix(&with_config(a, file, matches, name, &[("ratio", "beta")])?),
        Command::Attack(a) => commands::attack(&with_config(a, file, matches, name, &[])?),
        Command::Smd(a) => commands::smd(&with_config(a, file, matches, name, &[])?),
        Command::Crise(a) => commands::crise(&with_config(a, file, matches, name, &[])?),
        Command::Selectivity(a) => commands::selectivity(&with_config(a, file, matches, name, &[])?),
        Command::Eval(a) => commands::eval(&with_config(a, file, matches, name, &[])?),
        Command::Serve(a) => commands::serve(&with_config(a, file, matches, name, &[])?),
        Command::Replay(a) => {
            if file.is_some() {
                return Err(usage("replay takes its configuration as an argument, not --config"));
            }
            replay(a)
        }
    }
}

fn replay(r: &ReplayArgs) -> Result<()> {
    let cfg = ResolvedConfig::read(&r.config_file)?;
    let out = r.out_dir.clone();
    log::info!("replay: {} from {}", cfg.command, r.config_file.display());
    match cfg.command.as_str() {
        "mix" => {
            let mut a: args::MixArgs = cfg.args_as()?;
            a.out_dir = out.unwrap_or(a.out_dir);
            commands::mix(&a)
        }
        "attack" => {
            let mut a: args::AttackArgs = cfg.args_as()?;
            a.out_dir = out.unwrap_or(a.out_dir);
            commands::attack(&a)
        }
        "smd" => {
            let mut a: args::SmdArgs = cfg.args_as()?;
            a.out_dir = out.unwrap_or(a.out_dir);
            commands::smd(&a)
        }
        "crise" => {
            let mut a: CriseArgs = cfg.args_as()?;
            if let Some(dir) = out {
                let rebase = |p: &Path| dir.join(p.file_name().unwrap_or_default());
                a.out = rebase(&a.out);
                a.out_raw = a.out_raw.as_deref().map(rebase);
            }
            commands::crise(&a)
        }
        "selectivity" => {
            let mut a: args::SelectivityArgs = cfg.args_as()?;
            a.out_dir = out.unwrap_or(a.out_dir);
            commands::selectivity(&a)
        }
        "eval" => {
            let mut a: args::EvalArgs = cfg.args_as()?;
            a.out_dir = out.unwrap_or(a.out_dir);
            commands::eval(&a)
        }
        other => Err(usage(format!("cannot replay `{other}`"))),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    init_logging(cli.log_level);
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
