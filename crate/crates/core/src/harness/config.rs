use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    gen_synthetic, load_jsonl, load_label_space, make_splits, Example, LabelSpace, SplitRatios,
    SynthSpec, Vocabulary,
};
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig, Pooling};
use crate::objective::DualStreamConfig;
use crate::trainer::TrainConfig;

/// Where examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        spec: SynthSpec,
        #[serde(default)]
        seed: u64,
    },
    /// JSON-lines files. Missing `val`/`test` parts are carved out of
    /// `train` with the configured split ratios.
    Jsonl {
        label_space: PathBuf,
        train: PathBuf,
        #[serde(default)]
        val: Option<PathBuf>,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSettings {
    pub min_freq: usize,
    /// Includes the reserved ids.
    pub max_size: usize,
}

impl Default for VocabSettings {
    fn default() -> Self {
        Self {
            min_freq: 1,
            max_size: 30_000,
        }
    }
}

/// Model hyperparameters; vocabulary size and head come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub pooling: Pooling,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_seq_len: 128,
            dropout_rate: 0.1,
            pooling: Pooling::Cls,
        }
    }
}

/// Value lists for the exhaustive search. An absent list means the base
/// config's single value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub batch_size: Vec<usize>,
    pub alpha: Vec<f64>,
    pub layer_i: Vec<usize>,
    pub layer_j: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub splits: SplitRatios,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub vocab: VocabSettings,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub dual: DualStreamConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub note: Option<String>,
}

fn default_folds() -> usize {
    10
}

/// Examples split three ways, plus the label inventory.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub space: LabelSpace,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub stratified: bool,
}

impl PreparedData {
    pub fn all(&self) -> Vec<Example> {
        let mut v = self.train.clone();
        v.extend(self.val.iter().cloned());
        v.extend(self.test.iter().cloned());
        v
    }
}

impl ExperimentConfig {
    /// Reads a config file. Relative dataset paths are resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Jsonl {
            label_space,
            train,
            val,
            test,
        } = &mut cfg.data
        {
            for p in [Some(label_space), Some(train), val.as_mut(), test.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// Static checks that need no data.
    pub fn validate(&self) -> Result<()> {
        self.splits.validate()?;
        self.train.validate()?;
        if self.vocab.max_size <= crate::data::RESERVED {
            return Err(Error::Config("vocab.max_size leaves no room for tokens".into()));
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            spec.validate()?;
        }
        self.model_config(crate::data::RESERVED + 1, HeadKind::Binary)
            .validate()?;
        if self.train.mode != crate::trainer::TrainMode::Baseline {
            self.dual.validate(self.model.n_layers)?;
        }
        if let Some(grid) = &self.grid {
            let n = self.model.n_layers;
            if let Some(b) = grid.batch_size.iter().find(|b| **b < 2) {
                return Err(Error::Config(format!("grid batch size {b} is below 2")));
            }
            if let Some(a) = grid.alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
                return Err(Error::Config(format!("grid alpha {a} is outside [0, 1]")));
            }
            if let Some(l) = grid.layer_i.iter().chain(&grid.layer_j).find(|l| **l > n) {
                return Err(Error::Config(format!(
                    "grid layer {l} exceeds n_layers = {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, head: HeadKind) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
            dropout_rate: m.dropout_rate,
            head,
            pooling: m.pooling,
        }
    }

    pub fn label_space(&self) -> Result<LabelSpace> {
        match &self.data {
            DataSource::Synthetic { spec, .. } => spec.label_space(),
            DataSource::Jsonl { label_space, .. } => load_label_space(label_space),
        }
    }

    /// Loads or generates the examples and splits them.
    pub fn prepare(&self) -> Result<PreparedData> {
        let space = self.label_space()?;
        match &self.data {
            DataSource::Synthetic { spec, seed } => {
                let all = gen_synthetic(spec, *seed)?;
                let s = make_splits(&all, &space, self.splits, self.split_seed)?;
                Ok(PreparedData {
                    space,
                    train: s.train,
                    val: s.val,
                    test: s.test,
                    stratified: s.stratified,
                })
            }
            DataSource::Jsonl {
                train, val, test, ..
            } => {
                let train = load_jsonl(train, &space)?;
                let val = val.as_ref().map(|p| load_jsonl(p, &space)).transpose()?;
                let test = test.as_ref().map(|p| load_jsonl(p, &space)).transpose()?;
                let r_val = if val.is_some() { 0.0 } else { self.splits.val };
                let r_test = if test.is_some() { 0.0 } else { self.splits.test };
                let (train, carved_val, carved_test, stratified) = if r_val + r_test > 0.0 {
                    let total = self.splits.train + r_val + r_test;
                    let ratios = SplitRatios {
                        train: self.splits.train / total,
                        val: r_val / total,
                        test: r_test / total,
                    };
                    let s = make_splits(&train, &space, ratios, self.split_seed)?;
                    (s.train, s.val, s.test, s.stratified)
                } else {
                    (train, Vec::new(), Vec::new(), true)
                };
                Ok(PreparedData {
                    space,
                    train,
                    val: val.unwrap_or(carved_val),
                    test: test.unwrap_or(carved_test),
                    stratified,
                })
            }
        }
    }

    pub fn build_vocab(&self, train: &[Example]) -> Vocabulary {
        Vocabulary::build(train, self.vocab.min_freq, self.vocab.max_size)
    }
}
