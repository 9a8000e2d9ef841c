use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Example, LabelSpace, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One class index per example (binary and multi-class).
    Classes(Vec<usize>),
    /// `[batch, k]` 0/1 matrix (multi-label).
    MultiHot(Tensor),
}

/// A padded, encoded group of examples. Sequences are padded to the longest
/// one in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[batch, seq]` row-major.
    pub token_ids: Vec<usize>,
    /// `[batch, seq]`, `true` for real tokens.
    pub mask: Vec<bool>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub targets: Targets,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Drops the final partial batch.
    Train,
    /// Keeps every example.
    Eval,
}

impl Batch {
    pub fn from_examples(
        examples: &[&Example],
        vocab: &Vocabulary,
        space: &LabelSpace,
        max_seq_len: usize,
    ) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::Validation("empty batch".into()));
        }
        let encoded: Vec<_> = examples
            .iter()
            .map(|ex| vocab.encode(&ex.text, max_seq_len))
            .collect();
        let seq_len = encoded
            .iter()
            .map(|e| e.mask.iter().filter(|m| **m).count())
            .max()
            .unwrap_or(1)
            .max(1);
        let mut token_ids = Vec::with_capacity(examples.len() * seq_len);
        let mut mask = Vec::with_capacity(examples.len() * seq_len);
        for e in &encoded {
            token_ids.extend_from_slice(&e.ids[..seq_len]);
            mask.extend_from_slice(&e.mask[..seq_len]);
        }
        let targets = if space.task_kind().is_multilabel() {
            let k = space.len();
            let mut hot = Tensor::zeros(&[examples.len(), k]);
            for (i, ex) in examples.iter().enumerate() {
                for c in space.indices(ex)? {
                    hot.data_mut()[i * k + c] = 1.0;
                }
            }
            Targets::MultiHot(hot)
        } else {
            let mut classes = Vec::with_capacity(examples.len());
            for ex in examples {
                ex.validate(space)?;
                classes.push(space.indices(ex)?[0]);
            }
            Targets::Classes(classes)
        };
        Ok(Batch {
            ids: examples.iter().map(|e| e.id.clone()).collect(),
            token_ids,
            mask,
            batch_size: examples.len(),
            seq_len,
            targets,
        })
    }
}

/// Splits `examples` into batches. With a shuffle seed the order is a seeded
/// permutation, otherwise file order.
pub fn batches(
    examples: &[Example],
    vocab: &Vocabulary,
    space: &LabelSpace,
    max_seq_len: usize,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    mode: BatchMode,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || (mode == BatchMode::Train && batch_size < 2) {
        return Err(Error::Config(format!(
            "batch size {batch_size} is too small for {mode:?} mode"
        )));
    }
    let mut order: Vec<&Example> = examples.iter().collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size)
        .filter(|c| mode == BatchMode::Eval || c.len() == batch_size)
        .map(|c| Batch::from_examples(c, vocab, space, max_seq_len))
        .collect()
}
