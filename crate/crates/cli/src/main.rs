use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use seqcomm_cli::{check_seeds, run, runner, Invocation, Mode};
use seqcomm_core::trainer::Ablation;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Train,
    Eval,
    Ablate,
    Compare,
    Selftest,
}

/// Multi-agent training with value-aware sequential communication.
#[derive(Parser, Debug)]
#[command(name = "seqcomm", version)]
struct Args {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "train")]
    mode: ModeArg,
    /// Seeds: `3`, `0,2,5` or the inclusive range `0..4`.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Method variant: full, no_va, parallel_msgs, no_gp, no_influence, no_comm.
    #[arg(long)]
    ablation: Option<String>,
    /// Outer iterations, overriding the configuration.
    #[arg(long)]
    iters: Option<usize>,
    /// Evaluation episodes per seed.
    #[arg(long, default_value_t = 50)]
    episodes: usize,
}

fn invocation(args: Args) -> anyhow::Result<Invocation> {
    let seeds = runner::parse_seeds(&args.seeds)?;
    check_seeds(&seeds)?;
    let ablation = args.ablation.as_deref().map(Ablation::parse).transpose()?;
    Ok(Invocation {
        mode: match args.mode {
            ModeArg::Train => Mode::Train,
            ModeArg::Eval => Mode::Eval,
            ModeArg::Ablate => Mode::Ablate,
            ModeArg::Compare => Mode::Compare,
            ModeArg::Selftest => Mode::Selftest,
        },
        config: args.config,
        seeds,
        out: args.out,
        ablation,
        iterations: args.iters,
        episodes: args.episodes,
        workers: runner::worker_count(),
    })
}

fn main() -> ExitCode {
    let result = invocation(Args::parse()).and_then(|inv| run(&inv));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}
