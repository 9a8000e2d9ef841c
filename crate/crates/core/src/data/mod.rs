//! Dataset schema, tokenization, splitting, synthetic corpora and batching.

mod batch;
mod jsonl;
mod split;
mod synth;
mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{batches, Batch, BatchMode, Targets};
pub use jsonl::{load_jsonl, load_label_space, write_jsonl};
pub use split::{k_folds, make_splits, Folds, SplitRatios, Splits};
pub use synth::{gen_synthetic, SynthClass, SynthSpec};
pub use vocab::{tokenize, Encoded, Vocabulary, CLS_ID, PAD_ID, RESERVED, UNK_ID};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Binary,
    Multiclass,
    Multilabel,
}

impl TaskKind {
    pub fn is_multilabel(self) -> bool {
        self == TaskKind::Multilabel
    }
}

/// Ordered label inventory of a task. Label indices follow declaration order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LabelSpace {
    task_kind: TaskKind,
    labels: Vec<String>,
}

#[derive(Deserialize)]
struct RawLabelSpace {
    task_kind: TaskKind,
    labels: Vec<String>,
}

impl<'de> Deserialize<'de> for LabelSpace {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawLabelSpace::deserialize(d)?;
        LabelSpace::new(raw.task_kind, raw.labels).map_err(serde::de::Error::custom)
    }
}

impl LabelSpace {
    pub fn new(task_kind: TaskKind, labels: Vec<String>) -> Result<Self> {
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(Error::Validation(format!("duplicate label `{l}`")));
            }
        }
        let ok = match task_kind {
            TaskKind::Binary => labels.len() == 2,
            TaskKind::Multiclass | TaskKind::Multilabel => labels.len() >= 2,
        };
        if !ok {
            return Err(Error::Validation(format!(
                "{task_kind:?} task cannot have {} labels",
                labels.len()
            )));
        }
        Ok(Self { task_kind, labels })
    }

    pub fn task_kind(&self) -> TaskKind {
        self.task_kind
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    /// Label indices of an example, in label-space order.
    pub fn indices(&self, example: &Example) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(example.labels.len());
        for l in &example.labels {
            let i = self.index_of(l).ok_or_else(|| {
                Error::Validation(format!("example `{}`: unknown label `{l}`", example.id))
            })?;
            if !out.contains(&i) {
                out.push(i);
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: String,
    pub labels: Vec<String>,
}

impl Example {
    pub fn new(id: impl Into<String>, text: impl Into<String>, labels: &[&str]) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Checks the example against a label space: non-empty labels, all
    /// known, exactly one for single-label tasks.
    pub fn validate(&self, space: &LabelSpace) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Validation(format!("example `{}` has no labels", self.id)));
        }
        let idx = space.indices(self)?;
        if !space.task_kind().is_multilabel() && idx.len() != 1 {
            return Err(Error::Validation(format!(
                "example `{}` has {} labels but the task is single-label",
                self.id,
                idx.len()
            )));
        }
        Ok(())
    }
}
