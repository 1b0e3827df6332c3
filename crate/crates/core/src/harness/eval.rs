//! Split scoring, threshold calibration and report files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{split, Dataset, PostRecord, SplitPart};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::HyperParams;
use crate::harness::metrics::{calibrate_threshold, metrics, MetricsReport};
use crate::model::{Batch, Model};
use crate::numcore::{ParamSet, SeedTree};
use crate::temporal::post_aggregate;

pub const METRICS_FILE: &str = "metrics.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const MATRIX_FILE: &str = "metric_matrix.json";

/// Builds the model for `cfg` and checks that `params` fits it.
pub fn restore_model(cfg: &HyperParams, params: &ParamSet) -> Result<Model> {
    let mut fresh = ParamSet::new();
    let model = Model::new(&mut fresh, cfg.model_config(), &mut SeedTree::new(cfg.seed).stream("init"))?;
    let same = fresh.len() == params.len()
        && fresh
            .iter()
            .zip(params.iter())
            .all(|((_, a, ta), (_, b, tb))| a == b && ta.shape() == tb.shape());
    if !same {
        return Err(Error::Checkpoint("stored parameters do not match the configured model".into()));
    }
    Ok(model)
}

/// One post of an evaluated split, in time order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub timestamp: i64,
    pub domain_id: usize,
    pub label: u8,
    pub score: f64,
    /// Majority vote of the containing windows.
    pub class: u8,
}

/// Scores every post of `records` with windows built over the whole set in
/// time order.
pub fn score_posts(model: &Model, params: &ParamSet, records: &[&PostRecord], threshold: f64) -> Result<Vec<ScoreRow>> {
    let batch = Batch::new(records)?;
    let (windows, probs) = model.predict(params, &batch)?;
    let preds = post_aggregate(&probs, &windows, batch.len(), threshold)?;
    Ok(preds
        .into_iter()
        .enumerate()
        .map(|(i, p)| ScoreRow {
            id: batch.ids[i].clone(),
            timestamp: batch.timestamps[i],
            domain_id: batch.domains[i],
            label: batch.labels[i],
            score: p.score,
            class: p.class,
        })
        .collect())
}

/// Threshold maximising F1 on `rows`; 0.5 when they hold a single class.
pub fn calibrate_on(rows: &[ScoreRow]) -> Result<f64> {
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    match calibrate_threshold(&scores, &labels) {
        Err(Error::SingleClass) => {
            log::warn!("validation split holds a single class; using threshold 0.5");
            Ok(0.5)
        }
        other => other,
    }
}

pub fn report_for(rows: &[ScoreRow], threshold: f64) -> Result<MetricsReport> {
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<u8> = rows.iter().map(|r| r.label).collect();
    metrics(&scores, &labels, threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub metrics: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub dataset: String,
    pub n: u64,
    pub values: Vec<Option<f64>>,
}

/// Per-dataset summary metrics, one row per domain present in the split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<MatrixRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub matrix: MetricMatrix,
    pub rows: Vec<ScoreRow>,
}

fn part_records<'a>(data: &'a Dataset, idx: &[usize]) -> Vec<&'a PostRecord> {
    idx.iter().map(|&i| &data.records[i]).collect()
}

/// Calibrates on the validation split, then scores `part` at that threshold.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, part: SplitPart) -> Result<Evaluation> {
    let cfg = &ckpt.config;
    cfg.check_dataset(&data.header)?;
    let params = ckpt.best_params();
    let model = restore_model(cfg, &params)?;
    let parts = split(&data.records, cfg.split, cfg.seed)?;
    let val = parts.part(SplitPart::Validation);
    if val.is_empty() {
        return Err(Error::Invalid("validation split is empty".into()));
    }
    let target = parts.part(part);
    if target.is_empty() {
        return Err(Error::Invalid(format!("{} split is empty", part.name())));
    }
    let val_rows = score_posts(&model, &params, &part_records(data, val), 0.5)?;
    let threshold = calibrate_on(&val_rows)?;
    let rows = score_posts(&model, &params, &part_records(data, target), threshold)?;
    let report = EvalReport {
        split: part.name().to_string(),
        metrics: report_for(&rows, threshold)?,
    };
    let mut domains: Vec<usize> = rows.iter().map(|r| r.domain_id).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut matrix = MetricMatrix {
        columns: ["accuracy", "f1", "macro_f1", "auc", "mcc"].map(String::from).to_vec(),
        rows: Vec::new(),
    };
    for dom in domains {
        let sub: Vec<ScoreRow> = rows.iter().filter(|r| r.domain_id == dom).cloned().collect();
        let m = report_for(&sub, threshold)?;
        matrix.rows.push(MatrixRow {
            dataset: format!("domain_{dom}"),
            n: m.n,
            values: vec![Some(m.accuracy), Some(m.f1), Some(m.macro_f1), m.auc, m.mcc],
        });
    }
    Ok(Evaluation { report, matrix, rows })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Invalid(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(METRICS_FILE), &ev.report)?;
    write_json(&dir.join(MATRIX_FILE), &ev.matrix)?;
    let path = dir.join(SCORES_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    for row in &ev.rows {
        w.serialize(row).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Reads a score table written by [`write_evaluation`].
pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Invalid(format!("{}: {e}", path.display()))))
        .collect()
}
