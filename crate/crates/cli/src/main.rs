use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use trace_cli::commands::*;
use trace_cli::{Run, RunConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Gen,
    Pretrain,
    Align,
    Index,
    Retrieve,
    Rag,
    Eval,
}

/// Multimodal time-series retrieval pipeline.
#[derive(Debug, Parser)]
#[command(name = "trace", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| {
            writeln!(
                buf,
                "{} {:<5} {}",
                buf.timestamp_millis(),
                rec.level(),
                rec.args()
            )
        })
        .init();
}

fn init_threads() {
    let Ok(v) = std::env::var("TRACE_THREADS") else {
        return;
    };
    match v.parse::<usize>() {
        Ok(n) if n > 0 => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                log::warn!("TRACE_THREADS={n} ignored: {e}");
            }
        }
        _ => log::warn!("TRACE_THREADS={v:?} is not a positive integer; ignored"),
    }
}

fn run(args: Args) -> trace_cli::Result<()> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = args.out {
        cfg.paths.out = o;
    }
    let run = Run::new(cfg);
    match args.command {
        Command::Gen => cmd_gen(&run).map(drop),
        Command::Pretrain => cmd_pretrain(&run).map(drop),
        Command::Align => cmd_align(&run).map(drop),
        Command::Index => cmd_index(&run).map(drop),
        Command::Retrieve => cmd_retrieve(&run).map(drop),
        Command::Rag => cmd_rag(&run).map(drop),
        Command::Eval => cmd_eval(&run).map(drop),
    }
}

fn main() -> ExitCode {
    init_logging();
    init_threads();
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
