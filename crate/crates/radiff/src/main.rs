use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use radiff::config::RunConfig;
use radiff::pipeline::{
    cmd_augment, cmd_eval, cmd_fuse, cmd_generate, cmd_synth, cmd_train_ldm, cmd_train_vae, Task,
};

#[derive(Parser)]
#[command(name = "radiff", version, about = "Latent diffusion for 4D radar point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of radar frames.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "toy")]
        profile: String,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the point VAE on the fg or bg side of a dataset.
    TrainVae {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the conditional latent denoiser against a frozen VAE.
    TrainLdm {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample new radar frames conditioned on frames from a directory.
    Generate {
        #[arg(long)]
        task: Task,
        #[arg(long)]
        ldm: PathBuf,
        #[arg(long)]
        vae: PathBuf,
        /// Directory of frames providing boxes (fg) or LiDAR (bg).
        #[arg(long)]
        cond: PathBuf,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Must match the config the checkpoints were trained with.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Merge foreground and background frame directories by frame id.
    Fuse {
        #[arg(long)]
        fg: PathBuf,
        #[arg(long)]
        bg: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Ground-truth sampling augmentation over a dataset.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Compare a generated frame directory against a real one.
    Eval {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        /// Where to write the metric report (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> radiff::error::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> radiff::error::Result<()> {
    match cli.command {
        Command::Synth { out, frames, seed, profile, force } => {
            cmd_synth(&out, frames, seed, &profile, force)
        }
        Command::TrainVae { task, data, config, out, seed } => {
            let cfg = load_config(&config)?;
            cmd_train_vae(task, &data, &cfg, &out, seed)
        }
        Command::TrainLdm { task, data, config, vae, out, seed } => {
            let cfg = load_config(&config)?;
            cmd_train_ldm(task, &data, &cfg, &vae, &out, seed)
        }
        Command::Generate { task, ldm, vae, cond, steps, seed, out, config, force } => {
            let cfg = load_config(&config)?;
            cmd_generate(task, &ldm, &vae, &cond, steps, seed, &out, &cfg, force)
        }
        Command::Fuse { fg, bg, out, force } => cmd_fuse(&fg, &bg, &out, force),
        Command::Augment { data, out, seed, config, force } => {
            let cfg = load_config(&config)?;
            cmd_augment(&data, &out, seed, &cfg, force)
        }
        Command::Eval { real, generated, out, config } => {
            let cfg = load_config(&config)?;
            cmd_eval(&real, &generated, &out, &cfg)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
