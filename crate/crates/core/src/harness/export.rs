use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{create_dir, csv_error, labels_of, ExperimentConfig, RunCheckpoint};
use crate::error::{Error, Result};
use crate::trainer::infer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingLayer {
    /// Pooled output of the last encoder layer (the classifier input).
    PooledFinal,
    /// Pooled hidden state of the checkpoint's tap layer L_i.
    Tapped,
}

impl FromStr for EmbeddingLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled_final" => Ok(Self::PooledFinal),
            "tapped" => Ok(Self::Tapped),
            other => Err(Error::Config(format!(
                "unknown layer selector `{other}` (expected pooled_final or tapped)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub rows: usize,
    pub dims: usize,
    pub pca_components: usize,
}

/// `export-embeddings`: one CSV row per example of `split` with id, gold
/// and predicted labels (`|`-joined), the embedding, and optionally the
/// first two principal-component scores.
pub fn export_embeddings(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    split: SplitName,
    layer: EmbeddingLayer,
    with_pca: bool,
    out: &Path,
) -> Result<ExportSummary> {
    let ck = RunCheckpoint::load(checkpoint)?;
    let data = cfg.prepare()?;
    if data.space != ck.label_space {
        return Err(Error::Validation(
            "checkpoint label space differs from the configured data".into(),
        ));
    }
    let examples = match split {
        SplitName::Train => &data.train,
        SplitName::Val => &data.val,
        SplitName::Test => &data.test,
    };
    let model = ck.model.to_model()?;
    let tap = match layer {
        EmbeddingLayer::PooledFinal => None,
        EmbeddingLayer::Tapped => Some(ck.dual.layer_i),
    };
    let inf = infer(
        &model,
        examples,
        &ck.vocab,
        &data.space,
        cfg.train.batch_size,
        cfg.train.threshold,
        tap,
    )?;
    let vectors = match layer {
        EmbeddingLayer::PooledFinal => &inf.pooled,
        EmbeddingLayer::Tapped => inf.tapped.as_ref().unwrap_or(&inf.pooled),
    };
    let dims = vectors.first().map_or(0, |v| v.len());
    let scores = if with_pca { pca(vectors, 2) } else { Vec::new() };
    let n_pc = scores.first().map_or(0, |s| s.len());

    create_dir(out)?;
    let path = out.join("embeddings.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let mut header = vec!["id".to_string(), "gold".into(), "pred".into()];
    header.extend((0..dims).map(|d| format!("e{d}")));
    header.extend((0..n_pc).map(|c| format!("pca_{}", c + 1)));
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for (i, v) in vectors.iter().enumerate() {
        let mut row = vec![
            inf.ids[i].clone(),
            labels_of(&data.space, &inf.targets[i]),
            labels_of(&data.space, &inf.predictions[i]),
        ];
        row.extend(v.iter().map(|x| x.to_string()));
        if let Some(s) = scores.get(i) {
            row.extend(s.iter().map(|x| x.to_string()));
        }
        w.write_record(&row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(ExportSummary {
        rows: vectors.len(),
        dims,
        pca_components: n_pc,
    })
}

/// Scores of the centered rows on the top `k` principal axes, found by power
/// iteration with deflation on the sample covariance. Returns fewer columns
/// when the data has fewer non-degenerate directions.
pub fn pca(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    if n < 2 || d == 0 {
        return vec![Vec::new(); n];
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let mut cov = vec![0.0; d * d];
    for r in &centered {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += r[a] * r[b] / (n - 1) as f64;
            }
        }
    }
    let trace: f64 = (0..d).map(|a| cov[a * d + a]).sum();
    let mut axes: Vec<Vec<f64>> = Vec::new();
    for _ in 0..k.min(d) {
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract()).collect();
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let mut w: Vec<f64> = (0..d)
                .map(|a| (0..d).map(|b| cov[a * d + b] * v[b]).sum())
                .collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= 1e-12 * trace.max(1e-300) {
                lambda = 0.0;
                break;
            }
            w.iter_mut().for_each(|x| *x /= norm);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            lambda = norm;
            if delta < 1e-13 {
                break;
            }
        }
        if lambda == 0.0 {
            break;
        }
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] -= lambda * v[a] * v[b];
            }
        }
        axes.push(v);
    }
    centered
        .iter()
        .map(|r| {
            axes.iter()
                .map(|ax| r.iter().zip(ax).map(|(x, a)| x * a).sum())
                .collect()
        })
        .collect()
}
