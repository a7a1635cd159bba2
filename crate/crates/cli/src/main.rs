//! `rnn2ds`: train, run, probe and compare 2D-state caption decoders.

mod cmd;
mod common;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use common::{version, Outputs, RunManifest};
use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "rnn2ds", version, about = "Caption decoders with 2D latent states")]
struct Cli {
    /// Directory receiving every output file and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Single worker thread and no wall-clock data in outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads; falls back to RNN2DS_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Train a decoder and write a checkpoint with its epoch log.
    Train(cmd::train::TrainArgs),
    /// Caption feature tensors with a trained checkpoint.
    Caption(cmd::caption::CaptionArgs),
    /// Caption with restricted pooling or a deactivated channel next to the plain caption.
    Manipulate(cmd::manipulate::ManipulateArgs),
    /// Word/channel associations and activated-region maps.
    Interpret(cmd::interpret::InterpretArgs),
    /// Train 2D configurations against parameter-matched vector baselines.
    Compare(cmd::compare::CompareArgs),
    /// Finite-difference check of decoder gradients in 64-bit arithmetic.
    Gradcheck(cmd::gradcheck::GradcheckArgs),
    /// Re-run the command recorded in a manifest.
    Replay {
        /// manifest.json written by an earlier run.
        manifest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Caption(_) => "caption",
            Command::Manipulate(_) => "manipulate",
            Command::Interpret(_) => "interpret",
            Command::Compare(_) => "compare",
            Command::Gradcheck(_) => "gradcheck",
            Command::Replay { .. } => "replay",
        }
    }
}

/// What a subcommand hands back for the manifest.
pub struct Report {
    pub seed: u64,
    pub timings: Option<serde_json::Value>,
    /// Set when a check ran to completion and failed.
    pub failure: Option<String>,
}

pub struct Ctx {
    pub deterministic: bool,
}

#[derive(Serialize, Deserialize)]
struct RecordedConfig {
    deterministic: bool,
    #[serde(flatten)]
    command: Command,
}

fn threads(cli: &Cli) -> Result<Option<usize>> {
    if cli.deterministic {
        return Ok(Some(1));
    }
    if let Some(n) = cli.threads {
        return Ok(Some(n));
    }
    match std::env::var("RNN2DS_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("RNN2DS_THREADS must be a count, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn dispatch(command: &Command, ctx: &Ctx, out: &mut Outputs) -> Result<Report> {
    match command {
        Command::Train(a) => cmd::train::run(a, ctx, out),
        Command::Caption(a) => cmd::caption::run(a, ctx, out),
        Command::Manipulate(a) => cmd::manipulate::run(a, ctx, out),
        Command::Interpret(a) => cmd::interpret::run(a, ctx, out),
        Command::Compare(a) => cmd::compare::run(a, ctx, out),
        Command::Gradcheck(a) => cmd::gradcheck::run(a, ctx, out),
        Command::Replay { .. } => Err(CliError::usage("a manifest cannot replay a replay")),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let (command, deterministic) = match cli.command {
        Command::Replay { ref manifest } => {
            let text = std::fs::read_to_string(manifest)
                .map_err(|e| CliError::Io(format!("{}: {e}", manifest.display())))?;
            let m: RunManifest = serde_json::from_str(&text)
                .map_err(|e| CliError::Io(format!("{}: {e}", manifest.display())))?;
            let rec: RecordedConfig = serde_json::from_value(m.config)
                .map_err(|e| CliError::Io(format!("{}: {e}", manifest.display())))?;
            (rec.command, rec.deterministic || cli.deterministic)
        }
        ref c => (c.clone(), cli.deterministic),
    };
    let threads = if deterministic { Some(1) } else { threads(&cli)? };
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("thread count must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    let ctx = Ctx { deterministic };
    let mut out = Outputs::new(&cli.out_dir)?;
    let started = std::time::Instant::now();
    let report = dispatch(&command, &ctx, &mut out)?;
    let timings = (!deterministic).then(|| {
        let mut t = serde_json::json!({ "total_seconds": started.elapsed().as_secs_f64() });
        if let Some(extra) = report.timings {
            t["detail"] = extra;
        }
        t
    });
    let manifest = RunManifest {
        subcommand: command.name().to_string(),
        config: serde_json::to_value(RecordedConfig {
            deterministic,
            command: command.clone(),
        })?,
        seed: report.seed,
        version: version(),
        timings,
        outputs: out.files().to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let path = out.dir().join("manifest.json");
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    match report.failure {
        Some(msg) => Err(CliError::Check(msg)),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rnn2ds: {e}");
            e.exit_code()
        }
    }
}
