//! Precision, recall and F1 from one-vs-rest confusion counts.
//!
//! Per class: `P = TP/(TP+FP)`, `R = TP/(TP+FN)` and
//! `F1 = 2·TP/(2·TP+FP+FN)`, which equals `2PR/(P+R)` whenever that is
//! defined. A 0/0 ratio yields the zero-division value (0 by default) and
//! the class is counted in `zero_division_classes`.
//!
//! Single-label tasks make one decision per example per class; multi-label
//! tasks one per (example, label) pair. Accuracy is exact-set match, which
//! for single-label tasks is plain accuracy and equals micro F1.

use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, TaskKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub per_class: Vec<ClassCounts>,
    pub n_examples: usize,
    /// Examples whose predicted label set equals the gold set.
    pub exact_matches: usize,
}

/// Counts one-vs-rest decisions. `preds` and `targets` hold label index sets
/// per example; single-label tasks require exactly one index per example.
pub fn confusion(
    preds: &[Vec<usize>],
    targets: &[Vec<usize>],
    n_classes: usize,
    task: TaskKind,
) -> Result<ConfusionCounts> {
    if preds.len() != targets.len() {
        return Err(Error::Validation(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let mut per_class = vec![ClassCounts::default(); n_classes];
    let mut exact_matches = 0;
    for (p, t) in preds.iter().zip(targets) {
        let p = as_flags(p, n_classes, task)?;
        let t = as_flags(t, n_classes, task)?;
        if p == t {
            exact_matches += 1;
        }
        for (c, counts) in per_class.iter_mut().enumerate() {
            match (p[c], t[c]) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => counts.tn += 1,
            }
        }
    }
    Ok(ConfusionCounts {
        per_class,
        n_examples: preds.len(),
        exact_matches,
    })
}

fn as_flags(set: &[usize], n: usize, task: TaskKind) -> Result<Vec<bool>> {
    if !task.is_multilabel() && set.len() != 1 {
        return Err(Error::Validation(format!(
            "single-label task needs exactly one label per example, got {}",
            set.len()
        )));
    }
    let mut flags = vec![false; n];
    for &c in set {
        if c >= n {
            return Err(Error::IndexOutOfRange {
                what: "label index",
                index: c,
                size: n,
            });
        }
        flags[c] = true;
    }
    Ok(flags)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Macro,
    Micro,
    PerClass,
}

fn ratio(num: u64, den: u64, zero_division: f64) -> (f64, bool) {
    if den == 0 {
        (zero_division, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Scores of one set of counts, plus whether any 0/0 occurred.
pub fn class_prf(c: &ClassCounts, zero_division: f64) -> (Prf, bool) {
    let (precision, zp) = ratio(c.tp, c.tp + c.fp, zero_division);
    let (recall, zr) = ratio(c.tp, c.tp + c.fn_, zero_division);
    let (f1, zf) = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, zero_division);
    (
        Prf {
            precision,
            recall,
            f1,
        },
        zp || zr || zf,
    )
}

/// One entry for macro or micro averaging, one per class for `PerClass`.
pub fn prf(counts: &ConfusionCounts, averaging: Averaging, zero_division: f64) -> Vec<Prf> {
    match averaging {
        Averaging::PerClass => counts
            .per_class
            .iter()
            .map(|c| class_prf(c, zero_division).0)
            .collect(),
        Averaging::Macro => {
            let per = prf(counts, Averaging::PerClass, zero_division);
            let k = per.len().max(1) as f64;
            vec![Prf {
                precision: per.iter().map(|p| p.precision).sum::<f64>() / k,
                recall: per.iter().map(|p| p.recall).sum::<f64>() / k,
                f1: per.iter().map(|p| p.f1).sum::<f64>() / k,
            }]
        }
        Averaging::Micro => {
            let pooled = counts.per_class.iter().fold(ClassCounts::default(), |a, c| ClassCounts {
                tp: a.tp + c.tp,
                fp: a.fp + c.fp,
                fn_: a.fn_ + c.fn_,
                tn: a.tn + c.tn,
            });
            vec![class_prf(&pooled, zero_division).0]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences of the class.
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub n_examples: usize,
    pub accuracy: f64,
    pub macro_avg: Prf,
    pub micro_avg: Prf,
    pub per_class: Vec<ClassMetrics>,
    pub zero_division_classes: usize,
}

impl MetricsBundle {
    pub fn from_counts(counts: &ConfusionCounts, space: &LabelSpace) -> Self {
        let per = prf(counts, Averaging::PerClass, 0.0);
        let per_class = per
            .iter()
            .zip(&counts.per_class)
            .enumerate()
            .map(|(i, (p, c))| ClassMetrics {
                label: space.name(i).to_string(),
                precision: p.precision,
                recall: p.recall,
                f1: p.f1,
                support: c.tp + c.fn_,
            })
            .collect();
        Self {
            n_examples: counts.n_examples,
            accuracy: ratio(counts.exact_matches as u64, counts.n_examples as u64, 0.0).0,
            macro_avg: prf(counts, Averaging::Macro, 0.0)[0],
            micro_avg: prf(counts, Averaging::Micro, 0.0)[0],
            per_class,
            zero_division_classes: counts
                .per_class
                .iter()
                .filter(|c| class_prf(c, 0.0).1)
                .count(),
        }
    }

    /// Headline F1 (macro).
    pub fn f1(&self) -> f64 {
        self.macro_avg.f1
    }

    /// Copy with every score rounded to `decimals` places, for reports.
    pub fn rounded(&self, decimals: i32) -> Self {
        let r = |x: f64| round_to(x, decimals);
        let rp = |p: Prf| Prf {
            precision: r(p.precision),
            recall: r(p.recall),
            f1: r(p.f1),
        };
        Self {
            n_examples: self.n_examples,
            accuracy: r(self.accuracy),
            macro_avg: rp(self.macro_avg),
            micro_avg: rp(self.micro_avg),
            per_class: self
                .per_class
                .iter()
                .map(|c| ClassMetrics {
                    precision: r(c.precision),
                    recall: r(c.recall),
                    f1: r(c.f1),
                    ..c.clone()
                })
                .collect(),
            zero_division_classes: self.zero_division_classes,
        }
    }
}

pub fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Confusion counts and bundle in one call.
pub fn evaluate_predictions(
    preds: &[Vec<usize>],
    targets: &[Vec<usize>],
    space: &LabelSpace,
) -> Result<MetricsBundle> {
    let counts = confusion(preds, targets, space.len(), space.task_kind())?;
    Ok(MetricsBundle::from_counts(&counts, space))
}
