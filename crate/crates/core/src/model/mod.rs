//! Micro transformer encoder with per-layer hidden-state taps.

mod checkpoint;
mod encoder;
mod layers;

use serde::{Deserialize, Serialize};

use crate::data::{LabelSpace, TaskKind};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, NodeId};
use crate::tensor::Tensor;

pub use checkpoint::{load_state, state_of, ModelCheckpoint, NamedArray};
pub use encoder::{EncoderLayer, EncoderModel, Injection, ModelOutput};
pub use layers::{LayerNorm, Linear};

/// Classification head: number of outputs and how they are read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Two-way softmax.
    Binary,
    /// `c`-way softmax.
    Multiclass(usize),
    /// `k` independent sigmoids.
    Multilabel(usize),
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Binary => 2,
            HeadKind::Multiclass(c) | HeadKind::Multilabel(c) => c,
        }
    }

    pub fn for_labels(space: &LabelSpace) -> Self {
        match space.task_kind() {
            TaskKind::Binary => HeadKind::Binary,
            TaskKind::Multiclass => HeadKind::Multiclass(space.len()),
            TaskKind::Multilabel => HeadKind::Multilabel(space.len()),
        }
    }

    pub fn is_multilabel(self) -> bool {
        matches!(self, HeadKind::Multilabel(_))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Vector at position 0 (the CLS token).
    #[default]
    Cls,
    /// Average over real (unmasked) positions.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub head: HeadKind,
    /// Pooling that feeds the classification head.
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 {
            return fail("n_layers must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 || self.d_ff == 0 {
            return fail("vocab_size, max_seq_len and d_ff must be positive".into());
        }
        if self.head.outputs() < 2 {
            return fail("classification head needs at least 2 outputs".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Pools `[batch, seq, d]` hidden states to `[batch, d]`.
pub fn pool(g: &mut Graph, hidden: NodeId, mask: &[bool], kind: Pooling) -> Result<NodeId> {
    let shape = g.shape(hidden).to_vec();
    if shape.len() != 3 || mask.len() != shape[0] * shape[1] {
        return Err(Error::shape("pool", &shape, &[mask.len()]));
    }
    let s = shape[1];
    if let Some(row) = mask.chunks(s).position(|r| !r.iter().any(|m| *m)) {
        return Err(Error::Validation(format!("row {row} is all padding")));
    }
    match kind {
        Pooling::Cls => g.select_position(hidden, 0),
        Pooling::Mean => g.masked_mean(hidden, mask),
    }
}

/// Decodes logits into label index sets. Softmax heads take the argmax
/// (ties go to the lower index). Multi-label heads keep every label with
/// `sigmoid(logit) >= threshold`, falling back to the top label when none
/// qualifies.
pub fn predict(logits: &Tensor, head: HeadKind, threshold: f64) -> Vec<Vec<usize>> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let top = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
            if !head.is_multilabel() {
                return vec![top];
            }
            let picked: Vec<usize> = (0..c).filter(|&i| sigmoid(row[i]) >= threshold).collect();
            if picked.is_empty() {
                vec![top]
            } else {
                picked
            }
        })
        .collect()
}
