//! Experiment runners behind the command-line tool. Every runner writes its
//! artifacts into an output directory and returns a summary.

mod config;
mod export;
mod grid;
mod kfold;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_jsonl, LabelSpace, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::MetricsBundle;
use crate::model::{load_state, state_of, HeadKind, ModelCheckpoint, NamedArray};
use crate::objective::{DualStreamConfig, ProjectionNetwork};
use crate::trainer::{evaluate, train, Components, OptimizerStates, TrainData, TrainMode};

pub use config::{
    DataSource, ExperimentConfig, GridSpec, ModelSettings, PreparedData, VocabSettings,
};
pub use export::{export_embeddings, pca, EmbeddingLayer, ExportSummary, SplitName};
pub use grid::{grid_cells, run_grid, GridCell, GridResult, GridRow};
pub use kfold::{run_kfold, FoldRow, KFoldResult};

/// Decimal places kept in metrics reports.
pub const REPORT_DECIMALS: i32 = 6;

pub const RUN_FORMAT: &str = "selfaug-run";
pub const RUN_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionState {
    pub params: Vec<NamedArray>,
    pub running: Vec<RunningStats>,
}

/// Everything needed to use stream F for inference or to resume training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunCheckpoint {
    pub format: String,
    pub version: u32,
    pub mode: TrainMode,
    pub best_epoch: usize,
    pub label_space: LabelSpace,
    pub vocab: Vocabulary,
    pub dual: DualStreamConfig,
    pub model: ModelCheckpoint,
    pub model_c: Vec<NamedArray>,
    pub projection: ProjectionState,
    pub optimizer: OptimizerStates,
}

impl RunCheckpoint {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::Config(format!("checkpoint {} not found", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        let ck: RunCheckpoint = serde_json::from_slice(&bytes)?;
        if ck.format != RUN_FORMAT || ck.version != RUN_FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported run checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        Ok(ck)
    }

    pub fn components(&self) -> Result<Components> {
        let model_f = self.model.to_model()?;
        let mut model_c = model_f.clone();
        load_state(&mut model_c, &self.model_c)?;
        let mut projection = ProjectionNetwork::new(
            model_f.config().d_model,
            &self.dual.projection_dims,
            0,
        )?;
        load_state(&mut projection, &self.projection.params)?;
        if projection.layers.len() != self.projection.running.len() {
            return Err(Error::Validation("projection statistics do not match".into()));
        }
        for (l, s) in projection.layers.iter_mut().zip(&self.projection.running) {
            l.running_mean = s.mean.clone();
            l.running_var = s.var.clone();
        }
        Ok(Components {
            model_f,
            model_c,
            projection,
        })
    }
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: TrainMode,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub validation: MetricsBundle,
    pub test: MetricsBundle,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Static validation, data preparation and model-config checks; nothing is
/// written.
pub fn prepare_run(cfg: &ExperimentConfig) -> Result<(PreparedData, Vocabulary)> {
    cfg.validate()?;
    let data = cfg.prepare()?;
    if data.train.is_empty() || data.val.is_empty() || data.test.is_empty() {
        return Err(Error::Config(format!(
            "empty split: train {}, val {}, test {}",
            data.train.len(),
            data.val.len(),
            data.test.len()
        )));
    }
    let vocab = cfg.build_vocab(&data.train);
    cfg.model_config(vocab.len(), HeadKind::for_labels(&data.space))
        .validate()?;
    Ok((data, vocab))
}

/// `train`: one run into `out`.
pub fn run_train(cfg: &ExperimentConfig, out: &Path) -> Result<RunReport> {
    let (data, vocab) = prepare_run(cfg)?;
    run_with_data(cfg, &data, &vocab, out)
}

/// Trains on already prepared splits and writes `config.json`,
/// `epochs.jsonl`, `checkpoint.json` and `metrics.json` into `out`.
pub fn run_with_data(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    vocab: &Vocabulary,
    out: &Path,
) -> Result<RunReport> {
    let model_cfg = cfg.model_config(vocab.len(), HeadKind::for_labels(&data.space));
    let components = Components::init(&model_cfg, &cfg.dual, cfg.train.seed)?;
    create_dir(out)?;
    let mut snapshot = cfg.clone();
    snapshot.grid = None;
    snapshot.output_dir = None;
    write_json(&out.join("config.json"), &snapshot)?;

    let outcome = train(
        components,
        &TrainData {
            train: &data.train,
            val: &data.val,
            vocab,
            space: &data.space,
        },
        &cfg.dual,
        &cfg.train,
    )?;

    let epochs_path = out.join("epochs.jsonl");
    let mut lines = Vec::new();
    for r in &outcome.records {
        serde_json::to_writer(&mut lines, r)?;
        lines.push(b'\n');
    }
    fs::write(&epochs_path, lines).map_err(|e| Error::io(&epochs_path, e))?;

    let best = &outcome.best;
    let checkpoint = RunCheckpoint {
        format: RUN_FORMAT.into(),
        version: RUN_FORMAT_VERSION,
        mode: cfg.train.mode,
        best_epoch: outcome.best_epoch,
        label_space: data.space.clone(),
        vocab: vocab.clone(),
        dual: cfg.dual.clone(),
        model: ModelCheckpoint::of(&best.model_f),
        model_c: state_of(&best.model_c),
        projection: ProjectionState {
            params: state_of(&best.projection),
            running: best
                .projection
                .layers
                .iter()
                .map(|l| RunningStats {
                    mean: l.running_mean.clone(),
                    var: l.running_var.clone(),
                })
                .collect(),
        },
        optimizer: outcome.best_optimizer.clone(),
    };
    let ck_path = out.join("checkpoint.json");
    fs::write(&ck_path, serde_json::to_vec(&checkpoint)?).map_err(|e| Error::io(&ck_path, e))?;

    let test = evaluate(
        &best.model_f,
        &data.test,
        vocab,
        &data.space,
        cfg.train.batch_size,
        cfg.train.threshold,
    )?;
    let report = RunReport {
        mode: cfg.train.mode,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.records.len(),
        validation: outcome.best_val.rounded(REPORT_DECIMALS),
        test: test.rounded(REPORT_DECIMALS),
    };
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `ablate`: Baseline, +SA and +Proposed on shared splits and seeds, each
/// in its own subdirectory, summarized in `ablation.csv`/`ablation.json`.
pub fn run_ablate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AblationRow>> {
    let mut base = cfg.clone();
    base.train.mode = TrainMode::Proposed;
    let (data, vocab) = prepare_run(&base)?;
    let mut rows = Vec::new();
    for (mode, dir) in [
        (TrainMode::Baseline, "baseline"),
        (TrainMode::SaOnly, "sa_only"),
        (TrainMode::Proposed, "proposed"),
    ] {
        let mut c = cfg.clone();
        c.train.mode = mode;
        let report = run_with_data(&c, &data, &vocab, &out.join(dir))?;
        rows.push(AblationRow {
            setting: mode.label().to_string(),
            precision: report.test.macro_avg.precision,
            recall: report.test.macro_avg.recall,
            f1: report.test.macro_avg.f1,
        });
    }
    let path = out.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["setting", "precision", "recall", "f1"])
        .map_err(|e| csv_error(&path, e))?;
    for r in &rows {
        w.write_record([
            r.setting.clone(),
            fmt6(r.precision),
            fmt6(r.recall),
            fmt6(r.f1),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("ablation.json"), &rows)?;
    Ok(rows)
}

/// `gen-synth`: writes the configured synthetic corpus as JSON-lines splits
/// plus `label_space.json`, ready for a `jsonl` data source.
pub fn gen_synth(cfg: &ExperimentConfig, out: &Path) -> Result<PreparedData> {
    if !matches!(cfg.data, DataSource::Synthetic { .. }) {
        return Err(Error::Config("gen-synth needs a synthetic data source".into()));
    }
    cfg.splits.validate()?;
    let data = cfg.prepare()?;
    create_dir(out)?;
    write_json(&out.join("label_space.json"), &data.space)?;
    for (name, part) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        write_jsonl(out.join(format!("{name}.jsonl")), part)?;
    }
    Ok(data)
}

pub(crate) fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}


pub(crate) fn labels_of(space: &LabelSpace, idx: &[usize]) -> String {
    idx.iter().map(|&i| space.name(i)).collect::<Vec<_>>().join("|")
}
