use std::path::PathBuf;
use std::process::ExitCode;

use advocacy::config::DATA_ROOT_ENV;
use advocacy::harness::{cmd_compare, cmd_export_attention, cmd_frozen_judge, cmd_train, Invocation};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};

/// Train and compare advocacy nets and their attention baselines.
#[derive(Parser)]
#[command(name = "advocacy", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one variant and write checkpoint, metrics and manifest.
    Train(Common),
    /// Train every compared variant for every seed and summarize.
    Compare(Common),
    /// Continue a checkpoint with the judge frozen.
    FrozenJudge {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export the input and evidence images of one test example as PGM.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 0-based index into the test set.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

fn invocation(c: Common) -> Invocation {
    Invocation {
        config: c.config,
        out: c.out,
        seed_override: c.seed_override,
        data_root: Some(std::env::var_os(DATA_ROOT_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from)),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let manifest = cmd_train(&invocation(c)).context("train failed")?;
            for p in &manifest.artifacts {
                println!("{}", p.display());
            }
        }
        Command::Compare(c) => {
            let (_, summary) = cmd_compare(&invocation(c)).context("compare failed")?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", summary.to_table());
        }
        Command::FrozenJudge { common, checkpoint } => {
            let (_, record) = cmd_frozen_judge(&invocation(common), &checkpoint).context("frozen-judge failed")?;
            let m = &record.test_metrics;
            println!("accuracy_before = {:?}", m["accuracy_before"]);
            println!("accuracy_after = {:?}", m["accuracy_after"]);
        }
        Command::ExportAttention { common, checkpoint, index } => {
            let manifest = cmd_export_attention(&invocation(common), &checkpoint, index).context("export-attention failed")?;
            for p in &manifest.artifacts {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config_error = e.chain().any(|c| matches!(c.downcast_ref(), Some(advocacy::Error::Config { .. })));
            ExitCode::from(if config_error { 1 } else { 2 })
        }
    }
}
