//! smelab: generate data, train f_0, run sequential editing, report.
//!
//! Exit codes: 0 success, 1 other error, 2 usage, 3 missing input,
//! 4 config-hash mismatch, 5 checkpoint version mismatch, 6 a fold did not
//! complete.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sme_core::memory::MemoryPolicy;
use sme_core::SmeError;

use crate::config::{Ablation, Overrides, RunConfig, TaskKind};

pub const EXIT_MISSING: u8 = 3;
pub const EXIT_HASH: u8 = 4;
pub const EXIT_VERSION: u8 = 5;
pub const EXIT_FOLDS: u8 = 6;

/// An error that maps to a specific exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub msg: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Exit {}

pub fn exit(code: u8, msg: impl Into<String>) -> anyhow::Error {
    Exit { code, msg: msg.into() }.into()
}

#[derive(Parser)]
#[command(name = "smelab", version, about = "Sequential model editing lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic datasets.
    Gen(Flags),
    /// Train the initial model on the generated train split.
    Train(Flags),
    /// Run sequential editing over the edit folds.
    Edit(Flags),
    /// Aggregate fold reports into summary and plot CSVs.
    Report(Flags),
}

#[derive(Args, Clone)]
struct Flags {
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    task: Option<TaskKind>,
    #[arg(long)]
    editor: Option<String>,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated capacities sweep memory sizes.
    #[arg(long, value_delimiter = ',')]
    memory_size: Option<Vec<usize>>,
    #[arg(long, value_parser = parse_policy)]
    memory_policy: Option<MemoryPolicy>,
    #[arg(long)]
    patched_layer: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_policy(s: &str) -> Result<MemoryPolicy, String> {
    s.parse().map_err(|e: SmeError| e.to_string())
}

impl Flags {
    fn resolve(self) -> anyhow::Result<RunConfig> {
        if let Some(p) = &self.config {
            if !p.exists() {
                return Err(exit(EXIT_MISSING, format!("config file {} not found", p.display())));
            }
        }
        RunConfig::load(
            self.config.as_deref(),
            Overrides {
                task: self.task,
                editor: self.editor,
                ablation: self.ablation,
                folds: self.folds,
                seed: self.seed,
                memory_size: self.memory_size,
                memory_policy: self.memory_policy,
                patched_layer: self.patched_layer,
                out: self.out,
            },
        )
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(x) = cause.downcast_ref::<Exit>() {
            return x.code;
        }
        match cause.downcast_ref::<SmeError>() {
            Some(SmeError::Version { .. }) => return EXIT_VERSION,
            Some(SmeError::Io(io)) if io.kind() == std::io::ErrorKind::NotFound => return EXIT_MISSING,
            _ => {}
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Gen(f) => f.resolve().and_then(|c| commands::gen(&c)),
        Cmd::Train(f) => f.resolve().and_then(|c| commands::train(&c)),
        Cmd::Edit(f) => f.resolve().and_then(|c| commands::edit(&c)),
        Cmd::Report(f) => f.resolve().and_then(|c| commands::report(&c)),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
