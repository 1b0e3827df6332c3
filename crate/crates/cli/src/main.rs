use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tempofuse::datagen::{load_dataset, synth_generate, write_synth, Dataset, SplitPart, SynthesisConfig};
use tempofuse::harness::{evaluate, train, write_evaluation, Checkpoint, HyperParams, TrainOptions, CHECKPOINT_FILE};
use tempofuse::Error;

/// Synthesize multimodal post corpora, train the detector and evaluate it.
#[derive(Parser, Debug)]
#[command(name = "tempofuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (posts.jsonl + manifest.jsonl).
    Synth {
        /// TOML file with generator settings; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and write checkpoint.bin and loss_log.jsonl.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset file, or a directory holding posts.jsonl.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from an earlier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Calibrate on the validation split and report metrics for one split.
    Eval {
        /// Checkpoint file; defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Must match the configuration stored in the checkpoint when given.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed override given to `train`, if any.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train, validation or test.
        #[arg(long, default_value = "test")]
        split: SplitPart,
    },
}

fn dataset(path: &Path) -> tempofuse::Result<Dataset> {
    if path.is_dir() {
        load_dataset(&path.join("posts.jsonl"))
    } else {
        load_dataset(path)
    }
}

fn run(cli: Cli) -> tempofuse::Result<()> {
    match cli.command {
        Command::Synth { config, out, seed } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    toml::from_str::<SynthesisConfig>(&text)
                        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?
                }
                None => SynthesisConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let synth = synth_generate(&cfg)?;
            write_synth(&out, &synth)?;
            log::info!("wrote {} posts to {}", synth.records.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => {
            let mut cfg = match config {
                Some(path) => HyperParams::load(&path)?,
                None => HyperParams::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let data = dataset(&data)?;
            let summary = train(&cfg, &data, &out, &TrainOptions { resume, ..Default::default() })?;
            println!(
                "trained {} epochs ({} steps); best validation macro-F1 {:.4} at epoch {}; checkpoint {}",
                summary.epochs_done,
                summary.steps,
                summary.best_macro_f1,
                summary.best_epoch,
                summary.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            config,
            seed,
            data,
            out,
            split,
        } => {
            let path = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let ck = Checkpoint::load(&path)?;
            if let Some(cfg_path) = config {
                let mut cfg = HyperParams::load(&cfg_path)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                if cfg.hash() != ck.config.hash() {
                    return Err(Error::Config(format!(
                        "{} differs from the configuration stored in {}",
                        cfg_path.display(),
                        path.display()
                    )));
                }
            } else if seed.is_some_and(|s| s != ck.config.seed) {
                return Err(Error::Config(format!(
                    "seed {} differs from the seed {} stored in {}",
                    seed.unwrap_or_default(),
                    ck.config.seed,
                    path.display()
                )));
            }
            let data = dataset(&data)?;
            let ev = evaluate(&ck, &data, split)?;
            write_evaluation(&out, &ev)?;
            println!("{}", serde_json::to_string_pretty(&ev.report).expect("report serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
