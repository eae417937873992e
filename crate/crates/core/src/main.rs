use boxhead::commands;
use boxhead::config::RunConfig;
use boxhead::data::Split;
use boxhead::head::HeadVariant;
use boxhead::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "boxhead", version, about = "Score-map box heads over a frozen toy encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<HeadVariant>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset root.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and eval sequences.
    Gen(Common),
    /// Train one head variant.
    Train(Common),
    /// Score a checkpoint on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "eval")]
        split: SplitArg,
        /// Score the ground truth against itself.
        #[arg(long)]
        oracle: bool,
    },
    /// Train and score every head variant on one dataset.
    CompareHeads {
        #[command(flatten)]
        common: Common,
        /// Train the variants on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference gradient checks for every differentiable component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Time naive against optimized conv kernels.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(v) = c.variant {
        cfg.variant = v;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(d) = &c.dataset {
        cfg.dataset = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(c) => {
            let cfg = load(&c)?;
            let s = commands::cmd_gen(&cfg)?;
            println!("train sequences: {}", s.train_sequences);
            println!("eval sequences: {}", s.eval_sequences);
            println!("checksum: {}", s.checksum);
        }
        Command::Train(c) => {
            let cfg = load(&c)?;
            let out = commands::cmd_train(&cfg)?;
            if let Some(last) = out.trace.last() {
                println!("step {} loss {:.6}", last.step, last.loss.total);
            }
            println!(
                "train AO {:.4} SR_0.5 {:.4} SR_0.75 {:.4}",
                out.report.ao, out.report.sr_50, out.report.sr_75
            );
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            oracle,
        } => {
            let cfg = load(&common)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let r = commands::cmd_eval(&cfg, checkpoint.as_deref(), split, oracle)?;
            println!(
                "{split} AO {:.4} SR_0.5 {:.4} SR_0.75 {:.4} AUC {:.4} ({} frames)",
                r.ao, r.sr_50, r.sr_75, r.auc, r.frames
            );
        }
        Command::CompareHeads { common, parallel } => {
            let cfg = load(&common)?;
            let rows = commands::cmd_compare_heads(&cfg, parallel)?;
            print!("{}", commands::compare_table(&rows));
        }
        Command::Gradcheck { common, seeds } => {
            load(&common)?;
            if seeds == 0 {
                return Err(Error::Config("--seeds must be positive".into()));
            }
            let reports = commands::cmd_gradcheck(seeds)?;
            print!("{}", boxhead::gradcheck::format_reports(&reports));
        }
        Command::Bench { common, reps } => {
            let cfg = load(&common)?;
            let rows = commands::cmd_bench(&cfg, reps)?;
            print!("{}", boxhead::bench::format_rows(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
