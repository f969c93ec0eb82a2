//! `difflm` command line: argument parsing, config resolution, run
//! directories and exit codes.
//!
//! Every run echoes its effective config to `<out>/effective-config.toml`
//! before doing any work and keeps an `INCOMPLETE` marker in `<out>` until
//! it finishes. Errors are reported as one line on stderr:
//! `error kind=<config|runtime> msg=<text>`; config errors exit 2 and
//! leave nothing behind, runtime failures exit 1.

pub mod commands;
pub mod config;
pub mod experiment;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use config::{one_line, Config};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Config(m) => ("config", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        format!("error kind={kind} msg={}", one_line(msg))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write train/dev/test splits of the configured oracle corpus.
    GenCorpus,
    /// Train a diffusion LM; streams metrics and checkpoints.
    Train,
    /// Train latent classifiers against a trained model's embeddings.
    TrainClassifier,
    /// Unconditional samples with their oracle lm-score.
    Sample,
    /// Controlled generation for each configured task.
    Control,
    /// Fill the gap between a left and a right context.
    Infill,
    /// Score a file of samples.
    Eval,
    /// Finite-difference checks of every loss and the guidance objective.
    Gradcheck,
    /// Run an ablation grid and write a table.
    Ablate,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::Train => "train",
            Command::TrainClassifier => "train-classifier",
            Command::Sample => "sample",
            Command::Control => "control",
            Command::Infill => "infill",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Ablate => "ablate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PrecisionArg {
    #[value(name = "32")]
    P32,
    #[value(name = "64")]
    P64,
}

#[derive(Debug, Parser)]
#[command(name = "difflm", version, about = "Diffusion language model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config file; every key has a default.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default runs/<command>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `section.key=value`, applied after the config file; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
}

/// Runs one command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Config(first.to_string()).line());
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    if let Some(p) = cli.precision {
        overrides.push(format!("precision={}", if p == PrecisionArg::P32 { 32 } else { 64 }));
    }
    let cfg = Config::load(cli.config.as_deref(), &overrides)?;
    commands::precheck(cli.command, &cfg).map_err(CliError::Config)?;

    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    let runtime = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", out.display()));
    fs::create_dir_all(&out).map_err(runtime)?;
    let marker = out.join("INCOMPLETE");
    fs::write(&marker, format!("{} started\n", cli.command.name())).map_err(runtime)?;
    fs::write(out.join("effective-config.toml"), cfg.to_toml()).map_err(runtime)?;

    match commands::run(cli.command, &cfg, &out) {
        Ok(commands::Outcome::Complete) => {
            fs::remove_file(&marker).map_err(runtime)?;
            Ok(())
        }
        Ok(commands::Outcome::Partial(why)) => {
            fs::write(&marker, format!("{} {why}\n", cli.command.name())).map_err(runtime)?;
            Ok(())
        }
        Err(e) => {
            let msg = one_line(&e.to_string());
            let _ = fs::write(&marker, format!("{} failed: {msg}\n", cli.command.name()));
            Err(CliError::Runtime(msg))
        }
    }
}
