//! Deterministic train/validation/test splits and k-fold partitions.
//!
//! Both start from a seeded shuffle. When stratifying, each class's members
//! are spread evenly over one sequence (member `r` of a class with `m`
//! members is placed at key `(r + 0.5) / m`), so any contiguous slice or
//! round-robin assignment of that sequence carries close to the global class
//! proportions. The stratification key is the first label (in label-space
//! order) of each example.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, LabelSpace};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must be in [0, 1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    fn parts(&self) -> usize {
        [self.train, self.val, self.test].iter().filter(|r| **r > 0.0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    /// False when some class was too small to stratify.
    pub stratified: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Folds {
    pub folds: Vec<Vec<Example>>,
    pub stratified: bool,
}

impl Folds {
    /// `(training part, held-out fold)` for fold `i`.
    pub fn split(&self, i: usize) -> (Vec<Example>, Vec<Example>) {
        let train = self
            .folds
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect();
        (train, self.folds[i].clone())
    }
}

fn ordered(
    examples: &[Example],
    space: &LabelSpace,
    seed: u64,
    min_per_class: usize,
) -> Result<(Vec<Example>, bool)> {
    if examples.is_empty() {
        return Err(Error::Validation("cannot split an empty example list".into()));
    }
    let mut shuffled = examples.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut keys = Vec::with_capacity(shuffled.len());
    for ex in &shuffled {
        let first = *space
            .indices(ex)?
            .first()
            .ok_or_else(|| Error::Validation(format!("example `{}` has no labels", ex.id)))?;
        keys.push(first);
    }
    let mut counts = vec![0usize; space.len()];
    keys.iter().for_each(|&k| counts[k] += 1);
    let stratify = counts.iter().all(|&c| c == 0 || c >= min_per_class);
    if !stratify {
        return Ok((shuffled, false));
    }

    let mut rank = vec![0usize; space.len()];
    let mut placed: Vec<(f64, usize, Example)> = shuffled
        .into_iter()
        .zip(keys)
        .map(|(ex, k)| {
            let r = rank[k];
            rank[k] += 1;
            ((r as f64 + 0.5) / counts[k] as f64, k, ex)
        })
        .collect();
    placed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok((placed.into_iter().map(|(_, _, ex)| ex).collect(), true))
}

/// Partitions `examples` into train/val/test. Validation and test sizes are
/// `round(n · ratio)`; training takes the remainder.
pub fn make_splits(
    examples: &[Example],
    space: &LabelSpace,
    ratios: SplitRatios,
    seed: u64,
) -> Result<Splits> {
    ratios.validate()?;
    let (seq, stratified) = ordered(examples, space, seed, ratios.parts())?;
    let n = seq.len();
    let n_val = (n as f64 * ratios.val).round() as usize;
    let n_test = ((n as f64 * ratios.test).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;
    let mut it = seq.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let val = it.by_ref().take(n_val).collect();
    let test = it.collect();
    Ok(Splits {
        train,
        val,
        test,
        stratified,
    })
}

/// Round-robin assignment of the (stratified) sequence to `k` folds.
pub fn k_folds(examples: &[Example], space: &LabelSpace, k: usize, seed: u64) -> Result<Folds> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k >= 2, got {k}")));
    }
    if examples.len() < k {
        return Err(Error::Config(format!(
            "{} examples cannot fill {k} folds",
            examples.len()
        )));
    }
    let (seq, stratified) = ordered(examples, space, seed, k)?;
    let mut folds = vec![Vec::new(); k];
    for (i, ex) in seq.into_iter().enumerate() {
        folds[i % k].push(ex);
    }
    Ok(Folds { folds, stratified })
}
