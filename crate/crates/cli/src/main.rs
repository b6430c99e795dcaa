//! `deragec`: phonetic retrieval, MCQ denoising and generative correction
//! of named entities in ASR N-best lists.

mod commands;
mod config;
mod error;

use std::path::PathBuf;

use clap::Parser;

use crate::commands::Command;
use crate::config::Settings;

#[derive(Debug, Parser)]
#[command(name = "deragec", version, about, long_about = None)]
struct Cli {
    /// TOML config with [paths], [run], [filter], [backend], [gec_backend]
    /// and [tagger] sections; flags override it
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output on stderr (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(flatten)]
    settings: Settings,

    #[command(subcommand)]
    command: Command,
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let file = match &cli.config {
        Some(path) => match Settings::load(path) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {e}");
                return e.exit_code();
            }
        },
        None => Settings::default(),
    };
    let settings = cli.settings.overlay(file);
    match commands::execute(cli.command, &settings) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn main() {
    std::process::exit(run());
}
