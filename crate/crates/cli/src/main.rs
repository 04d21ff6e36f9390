use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use transnet::commands::{cmd_ablate, cmd_eval, cmd_generate, cmd_train_stage1, cmd_train_stage2};
use transnet::config::RunConfig;
use transnet::Error;

/// Transparent-object pose estimation on synthetic glassware.
#[derive(Parser)]
#[command(name = "transnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing non-empty output directory.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test dataset.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train stage 1 (depth + normals) or stage 2 (pose).
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        #[command(flatten)]
        common: Common,
        /// Dataset directory (overrides `dataset`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint directory for stage-2 training (overrides `stage1`).
        #[arg(long)]
        stage1: Option<PathBuf>,
        /// Stop after this many steps; rerunning without it resumes.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate trained checkpoints on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        stage2: Option<PathBuf>,
    },
    /// Train and evaluate the ablation toggle grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> transnet::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> transnet::Result<()> {
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            cmd_generate(&cfg, &out, common.overwrite)?;
        }
        Command::Train { stage, common, data, stage1, stop_after } => {
            let cfg = load_config(&common)?;
            let data = data.unwrap_or_else(|| cfg.dataset.clone());
            let stage1 = stage1.unwrap_or_else(|| cfg.stage1.clone());
            if stage == 1 {
                let out = common.out.clone().unwrap_or(stage1);
                cmd_train_stage1(&cfg, &data, &out, common.overwrite, stop_after)?;
            } else {
                let out = common.out.clone().unwrap_or_else(|| cfg.stage2.clone());
                cmd_train_stage2(&cfg, &data, &stage1, &out, common.overwrite, stop_after)?;
            }
        }
        Command::Eval { common, data, stage1, stage2 } => {
            let cfg = load_config(&common)?;
            let data = data.unwrap_or_else(|| cfg.dataset.clone());
            let stage1 = stage1.unwrap_or_else(|| cfg.stage1.clone());
            let stage2 = stage2.unwrap_or_else(|| cfg.stage2.clone());
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("eval"));
            let report = cmd_eval(&cfg, &data, &stage1, &stage2, &out)?;
            if let Some(all) = report.row("all") {
                log::info!(
                    "3D_50 {:.3}  10deg10cm {:.3}  rot {:.2} deg  trans {:.2} cm",
                    all.iou_50,
                    all.deg10_cm10,
                    all.rot_err_deg,
                    all.trans_err_cm
                );
            }
        }
        Command::Ablate { common, data } => {
            let cfg = load_config(&common)?;
            let data = data.unwrap_or_else(|| cfg.dataset.clone());
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("ablation"));
            cmd_ablate(&cfg, &data, &out, common.overwrite)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}
