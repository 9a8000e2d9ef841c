use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    csv_error, create_dir, fmt6, prepare_run, run_with_data, write_json, ExperimentConfig,
    PreparedData,
};
use crate::data::{k_folds, make_splits, SplitRatios};
use crate::error::{Error, Result};
use crate::metrics::Prf;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub fold: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub test: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KFoldResult {
    pub k: usize,
    pub folds: Vec<FoldRow>,
    pub mean: Prf,
    /// Sample standard deviation across folds.
    pub std: Prf,
    pub stratified: bool,
    pub warnings: Vec<String>,
}

/// `kfold`: pools all prepared examples, deals them into `k` folds, and
/// for each fold trains on the rest (with a validation part carved off by
/// the configured ratios) and tests on the fold.
pub fn run_kfold(cfg: &ExperimentConfig, k: usize, out: &Path, workers: usize) -> Result<KFoldResult> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    let (data, _) = prepare_run(cfg)?;
    let all = data.all();
    let folds = k_folds(&all, &data.space, k, cfg.split_seed)?;
    let mut warnings = Vec::new();
    if !folds.stratified {
        warnings.push(format!(
            "some class has fewer than {k} examples; folds are not stratified"
        ));
    }
    let val_share = cfg.splits.val / (cfg.splits.train + cfg.splits.val);
    if !(val_share > 0.0) {
        return Err(Error::Config("k-fold needs a positive validation ratio".into()));
    }
    let inner = SplitRatios {
        train: 1.0 - val_share,
        val: val_share,
        test: 0.0,
    };
    let mut prepared = Vec::with_capacity(k);
    for i in 0..k {
        let (rest, held) = folds.split(i);
        let s = make_splits(&rest, &data.space, inner, cfg.split_seed)?;
        if !s.stratified {
            warnings.push(format!("fold {i}: validation part is not stratified"));
        }
        let part = PreparedData {
            space: data.space.clone(),
            train: s.train,
            val: s.val,
            test: held,
            stratified: s.stratified,
        };
        if part.train.is_empty() || part.val.is_empty() {
            return Err(Error::Config(format!("fold {i} leaves an empty train or validation part")));
        }
        let vocab = cfg.build_vocab(&part.train);
        prepared.push((part, vocab));
    }
    create_dir(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let rows: Vec<FoldRow> = pool.install(|| {
        prepared
            .par_iter()
            .enumerate()
            .map(|(i, (part, vocab))| {
                let r = run_with_data(cfg, part, vocab, &out.join(format!("fold-{i:02}")))?;
                Ok(FoldRow {
                    fold: i,
                    n_train: part.train.len(),
                    n_val: part.val.len(),
                    n_test: part.test.len(),
                    best_epoch: r.best_epoch,
                    test: r.test.macro_avg,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let stat = |f: fn(&Prf) -> f64| -> (f64, f64) {
        let xs: Vec<f64> = rows.iter().map(|r| f(&r.test)).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        (mean, var.sqrt())
    };
    let (pm, ps) = stat(|p| p.precision);
    let (rm, rs) = stat(|p| p.recall);
    let (fm, fs) = stat(|p| p.f1);
    let result = KFoldResult {
        k,
        mean: Prf {
            precision: pm,
            recall: rm,
            f1: fm,
        },
        std: Prf {
            precision: ps,
            recall: rs,
            f1: fs,
        },
        folds: rows,
        stratified: folds.stratified,
        warnings,
    };

    let path = out.join("kfold.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["row", "precision", "recall", "f1"])
        .map_err(|e| csv_error(&path, e))?;
    let mut put = |name: String, p: &Prf| {
        w.write_record([name, fmt6(p.precision), fmt6(p.recall), fmt6(p.f1)])
            .map_err(|e| csv_error(&path, e))
    };
    for r in &result.folds {
        put(format!("fold-{}", r.fold), &r.test)?;
    }
    put("mean".into(), &result.mean)?;
    put("std".into(), &result.std)?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    write_json(&out.join("kfold.json"), &result)?;
    Ok(result)
}
