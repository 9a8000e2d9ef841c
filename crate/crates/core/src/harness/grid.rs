use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{csv_error, create_dir, fmt6, prepare_run, run_with_data, write_json, ExperimentConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub batch_size: usize,
    pub alpha: f64,
    pub layer_i: usize,
    pub layer_j: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: usize,
    #[serde(flatten)]
    pub params: GridCell,
    pub ok: bool,
    pub best_val_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub test_precision: Option<f64>,
    pub test_recall: Option<f64>,
    pub test_f1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub order: String,
    pub rows: Vec<GridRow>,
    /// Index into `rows`; `None` when every cell failed.
    pub winner: Option<usize>,
    pub failures: usize,
}

pub const GRID_ORDER: &str =
    "batch_size, alpha, layer_i, layer_j; nested loops in list order, batch_size outermost";

/// Cells of the grid in enumeration order: batch size varies slowest, then
/// α, then L_i, then L_j, each in the order listed in the config.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<GridCell> {
    let grid = cfg.grid.clone().unwrap_or_default();
    let or = |v: Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v };
    let bs = or(grid.batch_size, cfg.train.batch_size);
    let alphas = if grid.alpha.is_empty() {
        vec![cfg.dual.alpha]
    } else {
        grid.alpha
    };
    let lis = or(grid.layer_i, cfg.dual.layer_i);
    let ljs = or(grid.layer_j, cfg.dual.layer_j);
    let mut cells = Vec::new();
    for &batch_size in &bs {
        for &alpha in &alphas {
            for &layer_i in &lis {
                for &layer_j in &ljs {
                    cells.push(GridCell {
                        batch_size,
                        alpha,
                        layer_i,
                        layer_j,
                    });
                }
            }
        }
    }
    cells
}

/// `grid`: every cell trained on the same splits in `out/cell-NNN`, up to
/// `workers` at a time. A failing cell is recorded and the rest continue.
pub fn run_grid(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<GridResult> {
    if cfg.grid.is_none() {
        return Err(Error::Config("grid command needs a `grid` section".into()));
    }
    let (data, vocab) = prepare_run(cfg)?;
    let cells = grid_cells(cfg);
    create_dir(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let rows: Vec<GridRow> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(i, cell)| {
                let mut c = cfg.clone();
                c.train.batch_size = cell.batch_size;
                c.dual.alpha = cell.alpha;
                c.dual.layer_i = cell.layer_i;
                c.dual.layer_j = cell.layer_j;
                let result = c
                    .validate()
                    .and_then(|_| run_with_data(&c, &data, &vocab, &out.join(format!("cell-{i:03}"))));
                match result {
                    Ok(r) => GridRow {
                        cell: i,
                        params: *cell,
                        ok: true,
                        best_val_f1: Some(r.validation.macro_avg.f1),
                        best_epoch: Some(r.best_epoch),
                        test_precision: Some(r.test.macro_avg.precision),
                        test_recall: Some(r.test.macro_avg.recall),
                        test_f1: Some(r.test.macro_avg.f1),
                        error: None,
                    },
                    Err(e) => GridRow {
                        cell: i,
                        params: *cell,
                        ok: false,
                        best_val_f1: None,
                        best_epoch: None,
                        test_precision: None,
                        test_recall: None,
                        test_f1: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });

    let mut winner: Option<usize> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(f) = r.best_val_f1 {
            if winner.is_none_or(|w| f > rows[w].best_val_f1.unwrap_or(f64::NEG_INFINITY)) {
                winner = Some(i);
            }
        }
    }
    let result = GridResult {
        order: GRID_ORDER.into(),
        failures: rows.iter().filter(|r| !r.ok).count(),
        rows,
        winner,
    };
    write_grid_csv(&out.join("grid.csv"), &result)?;
    write_json(&out.join("grid.json"), &result)?;
    Ok(result)
}

fn write_grid_csv(path: &Path, result: &GridResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record([
        "cell",
        "batch_size",
        "alpha",
        "layer_i",
        "layer_j",
        "status",
        "best_val_f1",
        "best_epoch",
        "test_precision",
        "test_recall",
        "test_f1",
        "winner",
        "error",
    ])
    .map_err(|e| csv_error(path, e))?;
    let opt = |x: Option<f64>| x.map(fmt6).unwrap_or_default();
    for (i, r) in result.rows.iter().enumerate() {
        w.write_record([
            r.cell.to_string(),
            r.params.batch_size.to_string(),
            r.params.alpha.to_string(),
            r.params.layer_i.to_string(),
            r.params.layer_j.to_string(),
            if r.ok { "ok" } else { "failed" }.to_string(),
            opt(r.best_val_f1),
            r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            opt(r.test_precision),
            opt(r.test_recall),
            opt(r.test_f1),
            (result.winner == Some(i)).to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
