use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cyclicfl::StrategyKind;
use cyclicfl_cli::commands::{self, CmdError};
use cyclicfl_cli::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "cyclicfl", version, about = "Federated learning simulator with cyclic pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train cyclically, then train federatedly; writes rounds.csv, summary.json and checkpoints.
    Run,
    /// Closed-form communication totals for every strategy.
    Comm,
    /// Gram-matrix consistency between pre-training and held-out data.
    Consistency,
    /// Loss slice around a checkpoint, written as landscape.csv.
    Landscape,
    /// Per-device sample counts and label entropy of the partition.
    PartitionStats,
}

#[derive(Args, Debug)]
struct Overrides {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true, env = "CYCLICFL_SEED")]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, env = "CYCLICFL_OUT")]
    out: Option<PathBuf>,

    /// Pre-training rounds; the total number of rounds stays fixed.
    #[arg(long, global = true)]
    p1_rounds: Option<usize>,

    #[arg(long, global = true, value_parser = parse_strategy)]
    strategy: Option<StrategyKind>,

    /// Dirichlet concentration of the label partition.
    #[arg(long, global = true)]
    beta: Option<f64>,

    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Parameter file for `landscape`; defaults to <out>/model.bin.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: cyclicfl::Error| e.to_string())
}

fn resolve(o: &Overrides) -> Result<RunConfig, CmdError> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &o.out {
        cfg.out = out.clone();
    }
    if let Some(r) = o.p1_rounds {
        cfg.set_pretrain_rounds(r)?;
    }
    if let Some(s) = o.strategy {
        cfg.federated.strategy = s;
    }
    if let Some(b) = o.beta {
        cfg.partition.beta = b;
    }
    if let Some(t) = o.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), CmdError> {
    let cfg = resolve(&cli.overrides)?;
    match cli.command {
        Command::Run => {
            let art = commands::run(&cfg)?;
            let s = &art.summary;
            println!(
                "wrote {} max_accuracy={} argmax_round={} comm_units={}",
                art.dir.display(),
                s.max_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
                s.argmax_round.map_or("-".into(), |r| r.to_string()),
                s.comm_units
            );
        }
        Command::Comm => print!("{}", commands::comm_table(&cfg)?),
        Command::Consistency => print!("{}", commands::consistency(&cfg)?),
        Command::Landscape => {
            let (path, sharp) = commands::landscape(&cfg, cli.overrides.checkpoint.as_deref())?;
            println!("wrote {}\nsharpness={sharp:.16e}", path.display());
        }
        Command::PartitionStats => print!("{}", commands::partition_stats(&cfg)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.message() });
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
