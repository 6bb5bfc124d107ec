//! `fac`: dataset generators, the three studies, training and density evaluation.

mod report;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "fac", version, about = "Flow actor-critic experiments")]
struct Cli {
    /// Root under which runs without `--out` get their own directory.
    #[arg(long, global = true, env = "FAC_OUT_DIR", default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat key = value run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config's seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (for generators: the dataset file).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Two-cluster continuous-bandit dataset.
    GenBandit {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Four-mode 2-D Gaussian-mixture dataset.
    GenGmm2d {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
    },
    /// Flow, Gaussian, CVAE and DDPM behavior cloning on the 2-D mixture.
    DensityStudy {
        #[command(flatten)]
        common: Common,
    },
    /// FAC, FQL, CQL and SVR on the continuous bandit.
    BanditCompare {
        #[command(flatten)]
        common: Common,
    },
    /// Tabular operator property suite.
    TabularVerify {
        #[command(flatten)]
        common: Common,
        /// Number of random instances.
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Offline FAC training with checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; otherwise generated from the config's `generator`/`n`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop (after checkpointing) once this many steps are done.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Online fine-tuning on the bandit from an offline checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Offline checkpoint to start from (or a fine-tuning checkpoint with `--resume`).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Treat `--checkpoint` as a fine-tuning checkpoint and continue it.
        #[arg(long)]
        resume: bool,
        /// Offline dataset seeding the replay buffer.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Proxy log-densities from a checkpoint, on a dataset or the default grid.
    EvalDensity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let root = cli.out_root;
    let result = match cli.cmd {
        Cmd::GenBandit { common, n } => run::gen_dataset(&root, &common, "bandit", n),
        Cmd::GenGmm2d { common, n } => run::gen_dataset(&root, &common, "gmm2d", n),
        Cmd::DensityStudy { common } => run::density_study(&root, &common),
        Cmd::BanditCompare { common } => run::bandit_compare(&root, &common),
        Cmd::TabularVerify { common, instances } => run::tabular_verify(&root, &common, instances),
        Cmd::Train { common, data, resume, stop_after } => run::train(&root, &common, data, resume, stop_after),
        Cmd::Finetune { common, checkpoint, resume, data, stop_after } => run::finetune(&root, &common, &checkpoint, resume, data, stop_after),
        Cmd::EvalDensity { common, checkpoint, data } => run::eval_density(&root, &common, &checkpoint, data),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
