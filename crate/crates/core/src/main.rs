use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use lamp_core::cli::{cmd_eval, cmd_landscape, cmd_sweep, cmd_train, ExperimentConfig, Overrides};
use lamp_core::Error;

#[derive(Parser)]
#[command(name = "lamp", about = "Autoencoder anomaly detection with amplified reconstruction losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON experiment config; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss spec such as `l2`, `ssim` or `l1.lamp`.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train an autoencoder and write a checkpoint.
    Train(Common),
    /// Score a test split with a trained checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the loss x optimizer x batch size x seed grid.
    Sweep(Common),
    /// Loss landscape of one checkpoint, or two in paired mode.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..=2)]
        checkpoint: Vec<PathBuf>,
    },
}

fn load_config(c: &Common) -> lamp_core::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        out: c.out.clone(),
        seed: c.seed,
        loss: c.loss.clone(),
        optimizer: c.optimizer.clone(),
        batch_size: c.batch_size,
        epochs: c.epochs,
    })?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let done = cmd_train(&cfg).context("train failed")?;
            let last = done.history.epoch_losses.last().copied().unwrap_or(f64::NAN);
            println!("loss_kind={}", done.history.loss_kind);
            println!("final_loss={last}");
            println!("fingerprint={}", done.fingerprint);
            println!("checkpoint={}", done.out.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let report = cmd_eval(&cfg, &checkpoint).context("eval failed")?;
            println!("auroc={}", report.auroc);
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c)?;
            let out = cmd_sweep(&cfg).context("sweep failed")?;
            let failed = out.rows.iter().filter(|r| r.status != "ok").count();
            println!("rows={} ran={} failed={failed}", out.rows.len(), out.ran);
            for a in &out.aggregate {
                let mean = a.auroc_mean.map_or("nan".to_string(), |m| format!("{m:.4}"));
                println!("{} {} {} bs={} auroc_mean={mean}", a.task, a.loss, a.optimizer, a.batch_size);
            }
        }
        Command::Landscape { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let report = cmd_landscape(&cfg, &checkpoint).context("landscape failed")?;
            for (grid, s) in report.grids.iter().zip(&report.sharpness) {
                println!("grid={grid} sharpness={s}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
