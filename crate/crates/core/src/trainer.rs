//! Fine-tuning loop: Adam at a fixed learning rate, validation F1 after
//! every epoch, early stopping, and selection of the best epoch.

use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, Batch, BatchMode, Example, LabelSpace, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::metrics::{evaluate_predictions, MetricsBundle};
use crate::model::{predict, EncoderModel, Mode, ModelConfig};
use crate::objective::{
    classification_loss, composite_loss, composite_loss_node, contrastive_loss, dual_forward,
    DualStreamConfig, ProjectionNetwork, StepLosses,
};
use crate::optim::Adam;
use crate::param::{Module, Parameter};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Stream F alone, cross-entropy only.
    Baseline,
    /// Both streams with the injection, α forced to 0.
    SaOnly,
    /// Both streams plus the contrastive term.
    #[default]
    Proposed,
}

impl TrainMode {
    pub fn label(self) -> &'static str {
        match self {
            TrainMode::Baseline => "Baseline",
            TrainMode::SaOnly => "+SA",
            TrainMode::Proposed => "+Proposed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Sigmoid threshold for multi-label predictions.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            max_epochs: 20,
            patience: 5,
            batch_size: 16,
            seed: 0,
            mode: TrainMode::Proposed,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return Err(Error::Config(format!(
                "need 1 <= patience ({}) <= max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Independent random streams derived from one seed, so that initialization,
/// data order and dropout do not perturb each other across modes.
#[derive(Clone, Copy, Debug)]
pub struct SeedStreams {
    pub seed: u64,
}

impl SeedStreams {
    pub const INIT: u64 = 1;
    pub const PROJECTION: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DROPOUT_F: u64 = 4;
    pub const DROPOUT_C: u64 = 5;

    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    pub fn init_seed(&self) -> u64 {
        self.rng(Self::INIT).next_u64()
    }

    pub fn projection_seed(&self) -> u64 {
        self.rng(Self::PROJECTION).next_u64()
    }
}

/// Stream F, its copy C, and the shared projection network.
#[derive(Clone, Debug)]
pub struct Components {
    pub model_f: EncoderModel,
    pub model_c: EncoderModel,
    pub projection: ProjectionNetwork,
}

impl Components {
    /// F from the init stream, C as an identical copy with its own
    /// parameters, projection from its own stream.
    pub fn init(model: &ModelConfig, dual: &DualStreamConfig, seed: u64) -> Result<Self> {
        let streams = SeedStreams::new(seed);
        let model_f = EncoderModel::init(model.clone(), streams.init_seed())?;
        let model_c = model_f.clone();
        let projection =
            ProjectionNetwork::new(model.d_model, &dual.projection_dims, streams.projection_seed())?;
        Ok(Self {
            model_f,
            model_c,
            projection,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Means over the epoch's training steps.
    pub train: StepLosses,
    pub val_precision: f64,
    pub val_recall: f64,
    pub val_f1: f64,
    pub seconds: f64,
}

/// Patience rule on validation F1. Only a strictly greater F1 counts as an
/// improvement; training stops once `patience` epochs in a row fail to
/// improve.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: usize,
    since_best: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            since_best: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, f1: f64) -> StopDecision {
        let improved = match self.best {
            None => !f1.is_nan(),
            Some(b) => f1 > b,
        };
        if improved {
            self.best = Some(f1);
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        StopDecision {
            improved,
            stop: self.since_best >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// Replays the stopping rule over a validation-F1 trace. Returns the number
/// of epochs that run and the best epoch (1-based).
pub fn replay_early_stopping(trace: &[f64], patience: usize, max_epochs: usize) -> (usize, usize) {
    let mut es = EarlyStopping::new(patience);
    let mut ran = 0;
    for (i, &f1) in trace.iter().take(max_epochs).enumerate() {
        ran = i + 1;
        if es.update(ran, f1).stop {
            break;
        }
    }
    (ran, es.best_epoch())
}

pub struct TrainData<'a> {
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub vocab: &'a Vocabulary,
    pub space: &'a LabelSpace,
}

/// Optimizer state of every component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerStates {
    pub model_f: Adam,
    pub model_c: Adam,
    pub projection: Adam,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Components as of the best epoch.
    pub best: Components,
    pub best_optimizer: OptimizerStates,
    pub best_epoch: usize,
    pub best_val: MetricsBundle,
    pub records: Vec<EpochRecord>,
}

/// Trains according to `cfg.mode`. Baseline leaves C and the projection
/// untouched.
pub fn train(
    mut components: Components,
    data: &TrainData,
    dual: &DualStreamConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = components.model_f.config().clone();
    model_cfg.validate()?;
    if cfg.mode != TrainMode::Baseline {
        dual.validate(model_cfg.n_layers)?;
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("train and validation splits must be non-empty".into()));
    }
    if data.train.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "train split ({}) is smaller than one batch ({})",
            data.train.len(),
            cfg.batch_size
        )));
    }

    let streams = SeedStreams::new(cfg.seed);
    let mut shuffle = streams.rng(SeedStreams::SHUFFLE);
    let mut dropout_f = streams.rng(SeedStreams::DROPOUT_F);
    let mut dropout_c = streams.rng(SeedStreams::DROPOUT_C);
    let mut opt = OptimizerStates {
        model_f: Adam::new(cfg.learning_rate)?,
        model_c: Adam::new(cfg.learning_rate)?,
        projection: Adam::new(cfg.learning_rate)?,
    };
    let mut stopping = EarlyStopping::new(cfg.patience);
    let mut records = Vec::new();
    let mut best: Option<(Components, OptimizerStates, MetricsBundle)> = None;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let train_batches = batches(
            data.train,
            data.vocab,
            data.space,
            model_cfg.max_seq_len,
            cfg.batch_size,
            Some(shuffle.next_u64()),
            BatchMode::Train,
        )?;
        let mut sum = StepLosses::default();
        for (step, batch) in train_batches.iter().enumerate() {
            let losses = train_step(
                &mut components,
                &mut opt,
                batch,
                dual,
                cfg.mode,
                &mut dropout_f,
                &mut dropout_c,
            )
            .map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, step },
                other => other,
            })?;
            sum.ce_f += losses.ce_f;
            sum.ce_c += losses.ce_c;
            sum.contrastive += losses.contrastive;
            sum.total += losses.total;
        }
        let n = train_batches.len() as f64;
        let val = evaluate(
            &components.model_f,
            data.val,
            data.vocab,
            data.space,
            cfg.batch_size,
            cfg.threshold,
        )?;
        records.push(EpochRecord {
            epoch,
            train: StepLosses {
                ce_f: sum.ce_f / n,
                ce_c: sum.ce_c / n,
                contrastive: sum.contrastive / n,
                total: sum.total / n,
            },
            val_precision: val.macro_avg.precision,
            val_recall: val.macro_avg.recall,
            val_f1: val.f1(),
            seconds: started.elapsed().as_secs_f64(),
        });
        let decision = stopping.update(epoch, val.f1());
        if decision.improved {
            best = Some((components.clone(), opt.clone(), val));
        }
        if decision.stop {
            break;
        }
    }

    let (best, best_optimizer, best_val) = match best {
        Some(b) => b,
        // every validation F1 was NaN; fall back to the final state
        None => {
            let val = evaluate(
                &components.model_f,
                data.val,
                data.vocab,
                data.space,
                cfg.batch_size,
                cfg.threshold,
            )?;
            (components, opt, val)
        }
    };
    Ok(TrainOutcome {
        best,
        best_optimizer,
        best_epoch: stopping.best_epoch().max(1),
        best_val,
        records,
    })
}

/// One optimization step on `batch`. Returns the step's losses.
pub fn train_step(
    components: &mut Components,
    opt: &mut OptimizerStates,
    batch: &Batch,
    dual: &DualStreamConfig,
    mode: TrainMode,
    dropout_f: &mut dyn RngCore,
    dropout_c: &mut dyn RngCore,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let (loss, losses) = match mode {
        TrainMode::Baseline => {
            let out = components
                .model_f
                .forward(&mut g, batch, Mode::Train, None, dropout_f)?;
            let ce = classification_loss(&mut g, out.logits, &batch.targets)?;
            let v = g.value(ce).item()?;
            (
                ce,
                StepLosses {
                    ce_f: v,
                    ce_c: 0.0,
                    contrastive: 0.0,
                    total: v,
                },
            )
        }
        TrainMode::SaOnly | TrainMode::Proposed => {
            let out = dual_forward(
                &mut g,
                &components.model_f,
                &components.model_c,
                batch,
                dual,
                Mode::Train,
                dropout_f,
                dropout_c,
            )?;
            let ce_f = classification_loss(&mut g, out.stream_f.logits, &batch.targets)?;
            let ce_c = classification_loss(&mut g, out.stream_c.logits, &batch.targets)?;
            let (alpha, lc) = if mode == TrainMode::Proposed {
                let za = components.projection.project(&mut g, out.pooled_i, Mode::Train)?;
                let zb = components.projection.project(&mut g, out.pooled_j, Mode::Train)?;
                let c = contrastive_loss(&mut g, za, zb, dual.lambda_offdiag)?;
                (dual.alpha, Some(c.loss))
            } else {
                (0.0, None)
            };
            let total = composite_loss_node(&mut g, ce_f, ce_c, lc, alpha)?;
            let losses = composite_loss(
                g.value(ce_f).item()?,
                g.value(ce_c).item()?,
                match lc {
                    Some(n) => g.value(n).item()?,
                    None => 0.0,
                },
                alpha,
            )?;
            (total, losses)
        }
    };
    if !g.value(loss).item()?.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0, step: 0 });
    }
    let grads = g.backward(loss)?;
    apply(&grads, &g, &mut components.model_f, &mut opt.model_f)?;
    if mode != TrainMode::Baseline {
        if !dual.tie_weights {
            apply(&grads, &g, &mut components.model_c, &mut opt.model_c)?;
        }
        if mode == TrainMode::Proposed {
            apply(&grads, &g, &mut components.projection, &mut opt.projection)?;
        }
    }
    Ok(losses)
}

fn apply(
    grads: &crate::graph::Gradients,
    g: &Graph,
    module: &mut dyn Module,
    adam: &mut Adam,
) -> Result<()> {
    module.zero_grad();
    grads.accumulate_into(g, module.parameters_mut())?;
    let mut params: Vec<&mut Parameter> = module.parameters_mut();
    adam.step(&mut params)
}

/// Eval-mode pass over `examples` in file order.
#[derive(Clone, Debug)]
pub struct Inference {
    pub ids: Vec<String>,
    pub predictions: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    /// Pooled final-layer states, one row per example.
    pub pooled: Vec<Vec<f64>>,
    /// Hidden states of layer `tap` pooled the same way, when requested.
    pub tapped: Option<Vec<Vec<f64>>>,
}

pub fn infer(
    model: &EncoderModel,
    examples: &[Example],
    vocab: &Vocabulary,
    space: &LabelSpace,
    batch_size: usize,
    threshold: f64,
    tap: Option<usize>,
) -> Result<Inference> {
    if let Some(t) = tap {
        if t > model.config().n_layers {
            return Err(Error::IndexOutOfRange {
                what: "tapped layer",
                index: t,
                size: model.config().n_layers + 1,
            });
        }
    }
    let mut out = Inference {
        ids: Vec::with_capacity(examples.len()),
        predictions: Vec::with_capacity(examples.len()),
        targets: Vec::with_capacity(examples.len()),
        pooled: Vec::with_capacity(examples.len()),
        tapped: tap.map(|_| Vec::new()),
    };
    // eval mode never draws from this
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eval_batches = batches(
        examples,
        vocab,
        space,
        model.config().max_seq_len,
        batch_size.max(1),
        None,
        BatchMode::Eval,
    )?;
    for batch in &eval_batches {
        let mut g = Graph::new();
        let o = model.forward(&mut g, batch, Mode::Eval, None, &mut rng)?;
        out.predictions
            .extend(predict(g.value(o.logits), model.head(), threshold));
        let v = g.value(o.pooled);
        out.pooled.extend((0..v.rows()).map(|i| v.row(i).to_vec()));
        if let (Some(t), Some(rows)) = (tap, out.tapped.as_mut()) {
            let p = crate::model::pool(&mut g, o.hidden[t], &batch.mask, model.config().pooling)?;
            let v = g.value(p);
            rows.extend((0..v.rows()).map(|i| v.row(i).to_vec()));
        }
        out.ids.extend(batch.ids.iter().cloned());
    }
    for ex in examples {
        out.targets.push(space.indices(ex)?);
    }
    Ok(out)
}

/// Macro-averaged metrics of stream F's predictions on `examples`.
pub fn evaluate(
    model: &EncoderModel,
    examples: &[Example],
    vocab: &Vocabulary,
    space: &LabelSpace,
    batch_size: usize,
    threshold: f64,
) -> Result<MetricsBundle> {
    let inf = infer(model, examples, vocab, space, batch_size, threshold, None)?;
    evaluate_predictions(&inf.predictions, &inf.targets, space)
}

/// Tensor of the per-example rows, for callers that want matrix form.
pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    Tensor::new(vec![rows.len(), d], rows.concat())
}
