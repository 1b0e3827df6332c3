//! The training loop.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::datagen::{split, Dataset, PostRecord};
use crate::error::{Error, Result};
use crate::fusion::grl_schedule;
use crate::harness::checkpoint::{Checkpoint, Progress};
use crate::harness::config::HyperParams;
use crate::harness::eval::{calibrate_on, report_for, restore_model, score_posts};
use crate::harness::optim::Adam;
use crate::layers::Dropout;
use crate::model::{Adversary, Batch, LossContext, Model};
use crate::numcore::{Graph, ParamSet, SeedTree, StreamRng, Tensor};
use crate::objective::{class_weights, LossBreakdown};
use crate::prototypes::PrototypeBank;
use crate::temporal::build_windows;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_LOG_FILE: &str = "loss_log.jsonl";

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of initialising.
    pub resume: Option<PathBuf>,
    /// Return after this many epochs in this invocation.
    pub max_epochs_this_run: Option<usize>,
}

/// One line of the loss log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: u32,
    pub step: u64,
    pub alpha_grl: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs_done: u32,
    pub steps: u64,
    pub best_epoch: u32,
    pub best_macro_f1: f64,
    pub finished: bool,
    pub checkpoint: PathBuf,
}

fn records<'a>(data: &'a Dataset, idx: &[usize]) -> Vec<&'a PostRecord> {
    idx.iter().map(|&i| &data.records[i]).collect()
}

/// Keeps the first `steps` lines of an existing log.
fn truncate_log(path: &Path, steps: u64) -> Result<()> {
    let lines: Vec<String> = match File::open(path) {
        Ok(f) => BufReader::new(f)
            .lines()
            .take(steps as usize)
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    if lines.len() as u64 != steps {
        return Err(Error::Checkpoint(format!(
            "loss log has {} lines but the checkpoint is at step {steps}",
            lines.len()
        )));
    }
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn save_atomic(ck: &Checkpoint, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    ck.save(&tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn train(cfg: &HyperParams, data: &Dataset, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    cfg.check_dataset(&data.header)?;
    if let Some(r) = data.records.iter().find(|r| r.domain_id >= cfg.n_domains) {
        return Err(Error::Config(format!(
            "post {} has domain {} but n_domains = {}",
            r.id, r.domain_id, cfg.n_domains
        )));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOSS_LOG_FILE);

    let parts = split(&data.records, cfg.split, cfg.seed)?;
    if parts.train.is_empty() || parts.validation.is_empty() {
        return Err(Error::Invalid("training and validation splits must be nonempty".into()));
    }
    let tree = SeedTree::new(cfg.seed);

    let mut ck = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.hash() != cfg.hash() {
                return Err(Error::Config("checkpoint was written with a different configuration".into()));
            }
            restore_model(cfg, &ck.params)?;
            truncate_log(&log_path, ck.progress.step)?;
            ck
        }
        None => {
            let mut params = ParamSet::new();
            Model::new(&mut params, cfg.model_config(), &mut tree.stream("init"))?;
            File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            Checkpoint {
                config: *cfg,
                progress: Progress {
                    best_score: f64::NEG_INFINITY,
                    ..Default::default()
                },
                rng: tree.stream("train"),
                best: params.iter().map(|(_, _, t)| t.clone()).collect(),
                adam: Adam::new(cfg.optimizer, &params),
                params,
                bank: PrototypeBank::new(cfg.n_domains, cfg.d, cfg.proto_momentum)?,
            }
        }
    };
    let model = restore_model(cfg, &ck.params)?;

    let train_recs = records(data, &parts.train);
    let val_recs = records(data, &parts.validation);
    let class_w = {
        let batch = Batch::new(&train_recs)?;
        let windows = build_windows(&batch.labels, cfg.window, cfg.stride())?;
        class_weights(&windows.iter().map(|w| w.label).collect::<Vec<_>>())
    };
    let steps_per_epoch = parts.train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;

    let mut log = BufWriter::new(
        OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?,
    );
    let mut run_epochs = 0usize;
    while !ck.progress.finished {
        if opts.max_epochs_this_run.is_some_and(|m| run_epochs >= m) {
            break;
        }
        let epoch = ck.progress.epochs_done + 1;
        let mut order = parts.train.clone();
        order.shuffle(&mut ck.rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::new(&records(data, chunk))?;
            let alpha = grl_schedule(ck.progress.step as f64 / total_steps as f64);
            let mut drop1 = Dropout::new(cfg.dropout, StreamRng::seed_from_u64(ck.rng.random()));
            let mut drop2 = Dropout::new(cfg.dropout, StreamRng::seed_from_u64(ck.rng.random()));
            let ctx = LossContext {
                class_weights: class_w,
                globals: ck.bank.global_prototypes(),
                centroids: None,
            };
            let mut g = Graph::new();
            let b = g.bind(&ck.params);
            let s = model.step_loss(
                &mut g,
                &b,
                &batch,
                &cfg.loss,
                &ctx,
                &mut drop1,
                &mut drop2,
                Adversary::Reversed(alpha),
            )?;
            let grads = g.backward(s.total);
            let mut gs: Vec<Tensor> = b.vars().iter().map(|&v| grads.tensor(v)).collect();
            let grad_norm = ck.adam.step(&mut ck.params, &mut gs)?;
            ck.bank
                .ema_update(g.value(s.forward.p), &batch.labels, &batch.domains)?;
            ck.progress.step += 1;
            epoch_loss += s.breakdown.total;
            let rec = StepRecord {
                epoch,
                step: ck.progress.step,
                alpha_grl: alpha,
                grad_norm,
                loss: s.breakdown,
            };
            serde_json::to_writer(&mut log, &rec).map_err(|e| Error::io(&log_path, e.into()))?;
            log.write_all(b"\n").map_err(|e| Error::io(&log_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;

        let val_rows = score_posts(&model, &ck.params, &val_recs, 0.5)?;
        let threshold = calibrate_on(&val_rows)?;
        let macro_f1 = report_for(&val_rows, threshold)?.macro_f1;
        let p = &mut ck.progress;
        p.epochs_done = epoch;
        if macro_f1 > p.best_score {
            p.best_score = macro_f1;
            p.best_epoch = epoch;
            p.since_best = 0;
            ck.best = ck.params.iter().map(|(_, _, t)| t.clone()).collect();
        } else {
            p.since_best += 1;
        }
        log::info!(
            "epoch {epoch}: mean loss {:.4}, validation macro-F1 {macro_f1:.4} (best {:.4} at epoch {})",
            epoch_loss / steps_per_epoch as f64,
            p.best_score,
            p.best_epoch
        );
        if p.since_best as usize >= cfg.patience {
            log::info!("early stop after {} epochs without improvement", p.since_best);
            p.finished = true;
        }
        if epoch as usize >= cfg.epochs {
            p.finished = true;
        }
        save_atomic(&ck, &ckpt_path)?;
        run_epochs += 1;
    }
    if run_epochs == 0 {
        save_atomic(&ck, &ckpt_path)?;
    }
    Ok(TrainSummary {
        epochs_done: ck.progress.epochs_done,
        steps: ck.progress.step,
        best_epoch: ck.progress.best_epoch,
        best_macro_f1: ck.progress.best_score,
        finished: ck.progress.finished,
        checkpoint: ckpt_path,
    })
}
