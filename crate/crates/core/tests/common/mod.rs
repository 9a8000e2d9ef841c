#![allow(dead_code)]

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfaug_core::data::{
    batches, gen_synthetic, make_splits, BatchMode, Example, LabelSpace, SplitRatios, SynthClass,
    SynthSpec, TaskKind, Vocabulary,
};
use selfaug_core::graph::{BinaryKind, Graph, NodeId, UnaryKind};
use selfaug_core::metrics::Prf;
use selfaug_core::model::{EncoderModel, HeadKind, Mode, ModelConfig, Pooling};
use selfaug_core::objective::{contrastive_loss, ProjectionNetwork};
use selfaug_core::param::{Module, Parameter};
use selfaug_core::tensor::Tensor;
use selfaug_core::trainer::{evaluate, EpochRecord, SeedStreams, TrainConfig};
use selfaug_core::Result;

pub const H: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so kinks and domain edges stay further
/// than `H` from every sample.
pub fn away_from_zero(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for x in t.data_mut() {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        *x = sign * x.abs().max(1e-2);
    }
    t
}

/// Gradients smaller than this are lost in central-difference roundoff at
/// `H` for losses of order one.
pub const FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Reduces a node to a scalar as `Σ x ⊙ w` with fixed random weights, so
/// outputs whose plain sum is constant (softmax rows) still get tested.
pub fn probe(g: &mut Graph, x: NodeId, w: &Tensor) -> Result<NodeId> {
    let c = g.constant(w.clone());
    let m = g.mul(x, c)?;
    Ok(g.sum(m))
}

/// Largest elementwise relative error between backprop gradients and
/// central differences, over every element of every input.
pub fn check_inputs<F>(inputs: &[Tensor], build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| g.leaf(v.clone(), true)).collect();
        let out = build(&mut g, &ids).unwrap();
        g.value(out).item().unwrap()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone(), true)).collect();
    let out = build(&mut g, &ids).unwrap();
    let grads = g.backward(out).unwrap();

    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for k in 0..inputs[i].len() {
            let orig = vals[i].data()[k];
            vals[i].data_mut()[k] = orig + H;
            let plus = eval(&vals);
            vals[i].data_mut()[k] = orig - H;
            let minus = eval(&vals);
            vals[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            worst = worst.max(rel_err(analytic.data()[k], numeric));
        }
    }
    worst
}

/// Same check against every parameter of a module.
pub fn check_module<M: Module, F>(module: &mut M, loss: F) -> f64
where
    F: Fn(&mut Graph, &mut M) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, module).unwrap();
    let grads = g.backward(out).unwrap();
    let analytic: Vec<Tensor> = module
        .parameters()
        .iter()
        .map(|p| {
            grads
                .for_param(&g, p)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
        })
        .collect();
    let eval = |m: &mut M| -> f64 {
        let mut g = Graph::new();
        let out = loss(&mut g, m).unwrap();
        g.value(out).item().unwrap()
    };
    let mut worst = 0.0f64;
    let n_params = module.parameters().len();
    for pi in 0..n_params {
        for k in 0..analytic[pi].len() {
            let orig = module.parameters()[pi].value.data()[k];
            set(module, pi, k, orig + H);
            let plus = eval(module);
            set(module, pi, k, orig - H);
            let minus = eval(module);
            set(module, pi, k, orig);
            worst = worst.max(rel_err(analytic[pi].data()[k], (plus - minus) / (2.0 * H)));
        }
    }
    worst
}

fn set<M: Module>(m: &mut M, pi: usize, k: usize, v: f64) {
    let mut ps: Vec<&mut Parameter> = m.parameters_mut();
    ps[pi].value.data_mut()[k] = v;
}

pub type OpCheck = fn(u64) -> f64;

/// One gradient check per differentiable operation; each returns the worst
/// relative error on a random instance drawn from the seed.
pub fn op_checks() -> Vec<(&'static str, OpCheck)> {
    vec![
        ("matmul", op_matmul),
        ("matmul_batched_broadcast", op_matmul_batched),
        ("transpose", op_transpose),
        ("permute", op_permute),
        ("reshape", op_reshape),
        ("add", |s| op_binary(s, BinaryKind::Add)),
        ("sub", |s| op_binary(s, BinaryKind::Sub)),
        ("mul", |s| op_binary(s, BinaryKind::Mul)),
        ("add_bias", op_add_bias),
        ("mul_bias", op_mul_bias),
        ("scale", op_scale),
        ("relu", |s| op_unary(s, UnaryKind::Relu)),
        ("gelu", |s| op_unary(s, UnaryKind::Gelu)),
        ("exp", |s| op_unary(s, UnaryKind::Exp)),
        ("log", |s| op_unary(s, UnaryKind::Log)),
        ("sqrt", |s| op_unary(s, UnaryKind::Sqrt)),
        ("neg", |s| op_unary(s, UnaryKind::Neg)),
        ("softmax_rows", op_softmax),
        ("masked_softmax_rows", op_masked_softmax),
        ("layer_norm", op_layer_norm),
        ("batch_norm_features", op_batch_norm),
        ("cross_entropy", op_cross_entropy),
        ("bce_with_logits", op_bce),
        ("sum", op_sum),
        ("mean", op_mean),
        ("redundancy_loss", op_redundancy),
        ("gather_rows", op_gather),
        ("select_position", op_select),
        ("masked_mean", op_masked_mean),
        ("contrastive_loss", op_contrastive),
        ("projection_network", op_projection),
    ]
}

fn op_matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let a = uniform(&mut r, &[m, k], -1.0, 1.0);
    let b = uniform(&mut r, &[k, n], -1.0, 1.0);
    let w = uniform(&mut r, &[m, n], -1.0, 1.0);
    check_inputs(&[a, b], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        probe(g, y, &w)
    })
}

fn op_matmul_batched(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 3, 2], -1.0, 1.0);
    let b = uniform(&mut r, &[3, 2, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[2, 3, 3, 4], -1.0, 1.0);
    check_inputs(&[a, b], |g, x| {
        let y = g.matmul(x[0], x[1])?;
        probe(g, y, &w)
    })
}

fn op_transpose(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[2, 4, 3], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let y = g.transpose(x[0])?;
        probe(g, y, &w)
    })
}

fn op_permute(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 4, 2], -1.0, 1.0);
    let w = uniform(&mut r, &[2, 4, 3, 2], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let y = g.permute(x[0], &[0, 2, 1, 3])?;
        probe(g, y, &w)
    })
}

fn op_reshape(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 6], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let y = g.reshape(x[0], &[3, 4])?;
        probe(g, y, &w)
    })
}

fn op_binary(seed: u64, kind: BinaryKind) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let w = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check_inputs(&[a, b], |g, x| {
        let y = g.elementwise(x[0], x[1], kind)?;
        probe(g, y, &w)
    })
}

fn op_add_bias(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    let w = uniform(&mut r, &[2, 3, 4], -1.0, 1.0);
    check_inputs(&[a, b], |g, x| {
        let y = g.add_bias(x[0], x[1])?;
        probe(g, y, &w)
    })
}

fn op_mul_bias(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut r, &[4], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check_inputs(&[a, b], |g, x| {
        let y = g.mul_bias(x[0], x[1])?;
        probe(g, y, &w)
    })
}

fn op_scale(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let f = r.random_range(-3.0..3.0);
    check_inputs(&[a], |g, x| {
        let y = g.scale(x[0], f);
        probe(g, y, &w)
    })
}

fn op_unary(seed: u64, kind: UnaryKind) -> f64 {
    let mut r = rng(seed);
    let a = match kind {
        UnaryKind::Log | UnaryKind::Sqrt => uniform(&mut r, &[3, 4], 0.1, 3.0),
        UnaryKind::Relu => away_from_zero(&mut r, &[3, 4], -2.0, 2.0),
        _ => uniform(&mut r, &[3, 4], -2.0, 2.0),
    };
    let w = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let y = g.unary(x[0], kind)?;
        probe(g, y, &w)
    })
}

fn op_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 5], -3.0, 3.0);
    let w = uniform(&mut r, &[3, 5], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let y = g.softmax_rows(x[0])?;
        probe(g, y, &w)
    })
}

fn op_masked_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (b, rows, k) = (2, 3, 4);
    let a = uniform(&mut r, &[b, rows, k], -3.0, 3.0);
    let w = uniform(&mut r, &[b, rows, k], -1.0, 1.0);
    let mask = vec![true, true, false, true, true, false, false, false];
    check_inputs(&[a], |g, x| {
        let y = g.masked_softmax_rows(x[0], &mask)?;
        probe(g, y, &w)
    })
}

fn op_layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 5], -2.0, 2.0);
    let gain = uniform(&mut r, &[5], 0.5, 1.5);
    let bias = uniform(&mut r, &[5], -0.5, 0.5);
    let w = uniform(&mut r, &[3, 5], -1.0, 1.0);
    check_inputs(&[a, gain, bias], |g, x| {
        let y = g.layer_norm(x[0], x[1], x[2], 1e-12)?;
        probe(g, y, &w)
    })
}

fn op_batch_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[5, 3], -2.0, 2.0);
    let w = uniform(&mut r, &[5, 3], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let y = g.batch_norm_features(x[0], 1e-12)?;
        probe(g, y, &w)
    })
}

fn op_cross_entropy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[4, 3], -3.0, 3.0);
    let t: Vec<usize> = (0..4).map(|_| r.random_range(0..3)).collect();
    check_inputs(&[a], |g, x| g.cross_entropy(x[0], &t))
}

fn op_bce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[4, 3], -3.0, 3.0);
    let t = Tensor::new(
        vec![4, 3],
        (0..12).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect(),
    )
    .unwrap();
    check_inputs(&[a], |g, x| g.bce_with_logits(x[0], &t))
}

fn op_sum(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let s = g.sum(x[0]);
        let sq = g.mul(s, s)?;
        Ok(sq)
    })
}

fn op_mean(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[3, 4], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let s = g.mean(x[0]);
        g.unary(s, UnaryKind::Exp)
    })
}

fn op_redundancy(seed: u64) -> f64 {
    let mut r = rng(seed);
    let m = uniform(&mut r, &[4, 4], -1.0, 1.0);
    check_inputs(&[m], |g, x| g.redundancy_loss(x[0], 0.005))
}

fn op_gather(seed: u64) -> f64 {
    let mut r = rng(seed);
    let table = uniform(&mut r, &[5, 3], -1.0, 1.0);
    let ids: Vec<usize> = (0..6).map(|_| r.random_range(0..5)).collect();
    let w = uniform(&mut r, &[2, 3, 3], -1.0, 1.0);
    check_inputs(&[table], |g, x| {
        let y = g.gather_rows(x[0], &ids, &[2, 3])?;
        probe(g, y, &w)
    })
}

fn op_select(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 4, 3], -1.0, 1.0);
    let pos = r.random_range(0..4);
    let w = uniform(&mut r, &[2, 3], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let y = g.select_position(x[0], pos)?;
        probe(g, y, &w)
    })
}

fn op_masked_mean(seed: u64) -> f64 {
    let mut r = rng(seed);
    let a = uniform(&mut r, &[2, 4, 3], -1.0, 1.0);
    let mask = vec![true, true, true, false, true, false, false, false];
    let w = uniform(&mut r, &[2, 3], -1.0, 1.0);
    check_inputs(&[a], |g, x| {
        let y = g.masked_mean(x[0], &mask)?;
        probe(g, y, &w)
    })
}

fn op_contrastive(seed: u64) -> f64 {
    let mut r = rng(seed);
    let za = uniform(&mut r, &[6, 3], -1.0, 1.0);
    let zb = uniform(&mut r, &[6, 3], -1.0, 1.0);
    check_inputs(&[za, zb], |g, x| Ok(contrastive_loss(g, x[0], x[1], 0.005)?.loss))
}

fn op_projection(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut net = ProjectionNetwork::new(4, &[6, 6, 3], seed).unwrap();
    // push pre-activations away from the ReLU kink
    for l in &mut net.layers {
        for b in l.norm_bias.value.data_mut() {
            *b = if r.random_bool(0.5) { 0.5 } else { -0.5 };
        }
    }
    let x = uniform(&mut r, &[6, 4], -1.0, 1.0);
    let w = uniform(&mut r, &[6, 3], -1.0, 1.0);
    let cell = std::cell::RefCell::new(net);
    let input_err = check_inputs(std::slice::from_ref(&x), |g, ids| {
        let y = cell.borrow_mut().project(g, ids[0], Mode::Train)?;
        probe(g, y, &w)
    });
    let mut net = cell.into_inner();
    let param_err = check_module(&mut net, |g, m| {
        let xi = g.constant(x.clone());
        let y = m.project(g, xi, Mode::Train)?;
        probe(g, y, &w)
    });
    input_err.max(param_err)
}

pub fn tiny_config(n_layers: usize, head: HeadKind, pooling: Pooling, dropout: f64) -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        d_model: 4,
        n_heads: 2,
        n_layers,
        d_ff: 6,
        max_seq_len: 6,
        dropout_rate: dropout,
        head,
        pooling,
    }
}

/// Hand-made batch over a vocabulary of 9 ids with some padding.
pub fn tiny_batch(r: &mut impl Rng, head: HeadKind) -> selfaug_core::data::Batch {
    let (b, s) = (3, 5);
    let lens = [5, 3, 4];
    let mut token_ids = Vec::new();
    let mut mask = Vec::new();
    for &len in &lens {
        token_ids.push(2);
        mask.push(true);
        for p in 1..s {
            if p < len {
                token_ids.push(r.random_range(3..9));
                mask.push(true);
            } else {
                token_ids.push(0);
                mask.push(false);
            }
        }
    }
    let targets = match head {
        HeadKind::Multilabel(k) => selfaug_core::data::Targets::MultiHot(
            Tensor::new(
                vec![b, k],
                (0..b * k).map(|i| ((i * 7 + 1) % 3 == 0) as u8 as f64).collect(),
            )
            .unwrap(),
        ),
        h => selfaug_core::data::Targets::Classes(
            (0..b).map(|_| r.random_range(0..h.outputs())).collect(),
        ),
    };
    selfaug_core::data::Batch {
        ids: (0..b).map(|i| format!("x{i}")).collect(),
        token_ids,
        mask,
        batch_size: b,
        seq_len: s,
        targets,
    }
}

/// Bundled-style synthetic corpus used by the training tests.
pub fn synth_spec(ambiguity: f64, count: usize) -> SynthSpec {
    SynthSpec {
        task_kind: TaskKind::Binary,
        classes: vec![
            SynthClass {
                name: "stress".into(),
                keywords: vec!["anxious".into(), "overwhelmed".into(), "panicking".into()],
            },
            SynthClass {
                name: "calm".into(),
                keywords: vec!["relaxed".into(), "peaceful".into(), "rested".into()],
            },
        ],
        literal_templates: vec!["i feel so {kw} today".into(), "lately work leaves me {kw}".into()],
        figurative_templates: vec!["my phone looks {kw} lol".into()],
        filler: vec!["well".into(), "so".into()],
        max_filler: 2,
        ambiguity,
        count,
    }
}

pub struct SynthData {
    pub space: LabelSpace,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
    pub vocab: Vocabulary,
}

pub fn synth_data(ambiguity: f64, count: usize, seed: u64) -> SynthData {
    let spec = synth_spec(ambiguity, count);
    let space = spec.label_space().unwrap();
    let all = gen_synthetic(&spec, seed).unwrap();
    let s = make_splits(
        &all,
        &space,
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        },
        seed,
    )
    .unwrap();
    let vocab = Vocabulary::build(&s.train, 1, 500);
    SynthData {
        space,
        train: s.train,
        val: s.val,
        test: s.test,
        vocab,
    }
}

/// Textbook Adam, written independently of the library optimizer.
pub struct RefAdam {
    lr: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RefAdam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut Parameter>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for (i, p) in params.into_iter().enumerate() {
            let g = p.grad.data().to_vec();
            for k in 0..g.len() {
                self.m[i][k] = b1 * self.m[i][k] + (1.0 - b1) * g[k];
                self.v[i][k] = b2 * self.v[i][k] + (1.0 - b2) * g[k] * g[k];
                let m_hat = self.m[i][k] / (1.0 - b1.powi(self.t));
                let v_hat = self.v[i][k] / (1.0 - b2.powi(self.t));
                p.value.data_mut()[k] -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Plain single-model fine-tuning loop: same seed streams as the library
/// trainer, cross-entropy only, its own optimizer, no early stopping.
pub fn reference_single_stream(
    model_cfg: &ModelConfig,
    data: &SynthData,
    cfg: &TrainConfig,
    epochs: usize,
) -> Vec<EpochRecord> {
    let streams = SeedStreams::new(cfg.seed);
    let mut model = EncoderModel::init(model_cfg.clone(), streams.init_seed()).unwrap();
    let mut shuffle = streams.rng(SeedStreams::SHUFFLE);
    let mut dropout = streams.rng(SeedStreams::DROPOUT_F);
    let mut adam = RefAdam::new(cfg.learning_rate);
    let mut out = Vec::new();
    for epoch in 1..=epochs {
        let bs = batches(
            &data.train,
            &data.vocab,
            &data.space,
            model_cfg.max_seq_len,
            cfg.batch_size,
            Some(shuffle.next_u64()),
            BatchMode::Train,
        )
        .unwrap();
        let mut sum = 0.0;
        for batch in &bs {
            let mut g = Graph::new();
            let o = model
                .forward(&mut g, batch, Mode::Train, None, &mut dropout)
                .unwrap();
            let loss = match &batch.targets {
                selfaug_core::data::Targets::Classes(c) => g.cross_entropy(o.logits, c).unwrap(),
                selfaug_core::data::Targets::MultiHot(t) => g.bce_with_logits(o.logits, t).unwrap(),
            };
            sum += g.value(loss).item().unwrap();
            let grads = g.backward(loss).unwrap();
            for p in model.parameters_mut() {
                p.grad = grads
                    .for_param(&g, p)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
            }
            adam.update(model.parameters_mut());
        }
        let mean = sum / bs.len() as f64;
        let val = evaluate(
            &model,
            &data.val,
            &data.vocab,
            &data.space,
            cfg.batch_size,
            cfg.threshold,
        )
        .unwrap();
        out.push(EpochRecord {
            epoch,
            train: selfaug_core::objective::StepLosses {
                ce_f: mean,
                ce_c: 0.0,
                contrastive: 0.0,
                total: mean,
            },
            val_precision: val.macro_avg.precision,
            val_recall: val.macro_avg.recall,
            val_f1: val.macro_avg.f1,
            seconds: 0.0,
        });
    }
    out
}

/// Direct-count metrics used as an oracle: loops over examples per class
/// and applies the textbook ratio definitions.
pub struct BruteMetrics {
    pub per_class: Vec<Prf>,
    pub macro_avg: Prf,
    pub micro_avg: Prf,
    pub accuracy: f64,
}

pub fn brute_metrics(preds: &[Vec<usize>], gold: &[Vec<usize>], k: usize) -> BruteMetrics {
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let f1 = |p: f64, r: f64| if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    let mut per_class = Vec::new();
    let (mut stp, mut sfp, mut sfn) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for i in 0..preds.len() {
            let p = preds[i].contains(&c);
            let g = gold[i].contains(&c);
            if p && g {
                tp += 1.0;
            }
            if p && !g {
                fp += 1.0;
            }
            if !p && g {
                fn_ += 1.0;
            }
        }
        stp += tp;
        sfp += fp;
        sfn += fn_;
        let (pr, rc) = (div(tp, tp + fp), div(tp, tp + fn_));
        per_class.push(Prf {
            precision: pr,
            recall: rc,
            f1: f1(pr, rc),
        });
    }
    let avg = |f: fn(&Prf) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    let macro_avg = Prf {
        precision: avg(|p| p.precision),
        recall: avg(|p| p.recall),
        f1: avg(|p| p.f1),
    };
    let (mp, mr) = (div(stp, stp + sfp), div(stp, stp + sfn));
    let micro_avg = Prf {
        precision: mp,
        recall: mr,
        f1: f1(mp, mr),
    };
    let mut correct = 0.0;
    for i in 0..preds.len() {
        let mut a = preds[i].clone();
        let mut b = gold[i].clone();
        a.sort_unstable();
        b.sort_unstable();
        if a == b {
            correct += 1.0;
        }
    }
    BruteMetrics {
        per_class,
        macro_avg,
        micro_avg,
        accuracy: div(correct, preds.len() as f64),
    }
}

/// Random prediction/gold sets for one task kind.
pub fn random_instance(
    r: &mut impl Rng,
    kind: TaskKind,
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>, usize) {
    let k = match kind {
        TaskKind::Binary => 2,
        _ => r.random_range(2..7),
    };
    let n = r.random_range(1..60);
    let draw = |r: &mut dyn RngCore| -> Vec<usize> {
        if kind == TaskKind::Multilabel {
            let mut s: Vec<usize> = (0..k).filter(|_| r.next_u32() % 3 == 0).collect();
            if s.is_empty() {
                s.push((r.next_u32() as usize) % k);
            }
            s
        } else {
            vec![(r.next_u32() as usize) % k]
        }
    };
    let preds = (0..n).map(|_| draw(r)).collect();
    let gold = (0..n).map(|_| draw(r)).collect();
    (preds, gold, k)
}

pub fn label_space(kind: TaskKind, k: usize) -> LabelSpace {
    LabelSpace::new(kind, (0..k).map(|i| format!("c{i}")).collect()).unwrap()
}

pub fn dual_cfg(layer_i: usize, layer_j: usize) -> selfaug_core::objective::DualStreamConfig {
    selfaug_core::objective::DualStreamConfig {
        layer_i,
        layer_j,
        projection_dims: vec![6, 6, 3],
        ..Default::default()
    }
}

/// Tied weights and a zero injection: C's logits against a plain forward
/// pass of F, compared bit for bit.
pub fn zero_injection_is_plain_forward(seed: u64) -> bool {
    use selfaug_core::objective::dual_forward;
    let mut r = rng(seed);
    let n_layers = r.random_range(1..4);
    let model = EncoderModel::init(tiny_config(n_layers, HeadKind::Binary, Pooling::Cls, 0.1), seed).unwrap();
    let batch = tiny_batch(&mut r, HeadKind::Binary);
    let mut cfg = dual_cfg(r.random_range(0..=n_layers), r.random_range(0..=n_layers));
    cfg.tie_weights = true;
    cfg.zero_injection = true;
    let mut g = Graph::new();
    let out = dual_forward(&mut g, &model, &model, &batch, &cfg, Mode::Train, &mut rng(1), &mut rng(2)).unwrap();
    let mut h = Graph::new();
    let plain = model.forward(&mut h, &batch, Mode::Train, None, &mut rng(2)).unwrap();
    g.value(out.stream_c.logits) == h.value(plain.logits)
}

/// Tied copies, injection of the embedding output into itself: C's
/// layer-0 state must be exactly twice F's.
pub fn self_injection_doubles(seed: u64) -> bool {
    use selfaug_core::objective::dual_forward;
    let mut r = rng(seed);
    let model = EncoderModel::init(tiny_config(2, HeadKind::Binary, Pooling::Cls, 0.0), seed).unwrap();
    let batch = tiny_batch(&mut r, HeadKind::Binary);
    let mut cfg = dual_cfg(0, 0);
    cfg.tie_weights = true;
    let mut g = Graph::new();
    let out = dual_forward(&mut g, &model, &model, &batch, &cfg, Mode::Eval, &mut rng(1), &mut rng(1)).unwrap();
    let f = g.value(out.stream_f.hidden[0]);
    let c = g.value(out.stream_c.hidden[0]);
    f.data().iter().zip(c.data()).all(|(a, b)| 2.0 * a == *b)
}

pub struct GradientProbe {
    /// Largest |∂ce_c/∂θ| over F's parameters from backprop.
    pub backprop_max: f64,
    /// Central difference of ce_c for the probed parameter entry.
    pub numeric: f64,
    /// Backprop value for the probed entry.
    pub analytic: f64,
}

/// Gradient of C's classification loss with respect to stream F, probing
/// one entry of F's token embedding (an F-only parameter that feeds the
/// injected state).
pub fn probe_c_loss_wrt_f(flow: selfaug_core::objective::GradientFlow, seed: u64) -> GradientProbe {
    use selfaug_core::objective::{classification_loss, dual_forward};
    let mut r = rng(seed);
    let mut model_f =
        EncoderModel::init(tiny_config(2, HeadKind::Binary, Pooling::Cls, 0.0), seed).unwrap();
    let model_c = EncoderModel::init(tiny_config(2, HeadKind::Binary, Pooling::Cls, 0.0), seed + 1).unwrap();
    let batch = tiny_batch(&mut r, HeadKind::Binary);
    let mut cfg = dual_cfg(1, 1);
    cfg.augment_gradient = flow;
    let ce_c = |g: &mut Graph, f: &EncoderModel| -> NodeId {
        let out = dual_forward(g, f, &model_c, &batch, &cfg, Mode::Train, &mut rng(1), &mut rng(2)).unwrap();
        classification_loss(g, out.stream_c.logits, &batch.targets).unwrap()
    };
    let mut g = Graph::new();
    let loss = ce_c(&mut g, &model_f);
    let grads = g.backward(loss).unwrap();
    let mut backprop_max = 0.0f64;
    for p in model_f.parameters() {
        if let Some(t) = grads.for_param(&g, p) {
            backprop_max = backprop_max.max(t.data().iter().fold(0.0f64, |m, x| m.max(x.abs())));
        }
    }
    // the CLS row is used by every example
    let k = selfaug_core::data::CLS_ID * model_f.config().d_model;
    let analytic = grads
        .for_param(&g, &model_f.token_embedding)
        .map_or(0.0, |t| t.data()[k]);
    let orig = model_f.token_embedding.value.data()[k];
    let mut at = |v: f64| {
        model_f.token_embedding.value.data_mut()[k] = v;
        let mut g = Graph::new();
        let l = ce_c(&mut g, &model_f);
        g.value(l).item().unwrap()
    };
    let numeric = (at(orig + H) - at(orig - H)) / (2.0 * H);
    GradientProbe {
        backprop_max,
        numeric,
        analytic,
    }
}

/// Contrastive loss of two independent standard-normal `[n, p]` batches.
pub fn independent_contrastive(n: usize, p: usize, lambda: f64, seed: u64) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng(seed);
    let mut draw = || {
        Tensor::new(vec![n, p], (0..n * p).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
    };
    let (a, b) = (draw(), draw());
    let mut g = Graph::new();
    let (a, b) = (g.constant(a), g.constant(b));
    let out = contrastive_loss(&mut g, a, b, lambda).unwrap();
    g.value(out.loss).item().unwrap()
}

/// Large-batch expectation for independent inputs: each entry of the
/// cross-correlation matrix has mean 0 and variance 1/n, so the diagonal
/// contributes p·(1 + 1/n) and the off-diagonal λ·p·(p−1)/n.
pub fn independent_limit(n: usize, p: usize, lambda: f64) -> f64 {
    let (n, p) = (n as f64, p as f64);
    p * (1.0 + 1.0 / n) + lambda * p * (p - 1.0) / n
}

pub fn repo_path(rel: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn bundled_config() -> selfaug_core::harness::ExperimentConfig {
    selfaug_core::harness::ExperimentConfig::load(repo_path("configs/synth_binary.json")).unwrap()
}

/// The bundled config shrunk to a few seconds of work.
pub fn small_experiment(count: usize, epochs: usize) -> selfaug_core::harness::ExperimentConfig {
    use selfaug_core::harness::DataSource;
    let mut cfg = bundled_config();
    if let DataSource::Synthetic { spec, .. } = &mut cfg.data {
        spec.count = count;
    }
    cfg.model.d_model = 8;
    cfg.model.d_ff = 16;
    cfg.model.max_seq_len = 16;
    cfg.dual.projection_dims = vec![8, 8, 4];
    cfg.train.max_epochs = epochs;
    cfg.train.patience = epochs;
    cfg.train.batch_size = 8;
    cfg
}
