use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{LayerNorm, Linear};
use super::{pool, HeadKind, Mode, ModelConfig};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::param::{Module, Parameter};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

/// Post-norm encoder block: attention → add & norm → feed-forward → add & norm.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attention_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub ff_norm: LayerNorm,
}

impl EncoderLayer {
    fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            query: Linear::new(&format!("{name}.attention.query"), d, d, rng),
            key: Linear::new(&format!("{name}.attention.key"), d, d, rng),
            value: Linear::new(&format!("{name}.attention.value"), d, d, rng),
            output: Linear::new(&format!("{name}.attention.output"), d, d, rng),
            attention_norm: LayerNorm::new(&format!("{name}.attention.norm"), d),
            ff_in: Linear::new(&format!("{name}.ff.in"), d, cfg.d_ff, rng),
            ff_out: Linear::new(&format!("{name}.ff.out"), cfg.d_ff, d, rng),
            ff_norm: LayerNorm::new(&format!("{name}.ff.norm"), d),
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        batch: &Batch,
        cfg: &ModelConfig,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<NodeId> {
        let (b, s, h, dh) = (batch.batch_size, batch.seq_len, cfg.n_heads, cfg.head_dim());
        let split_heads = |g: &mut Graph, t: NodeId| -> Result<NodeId> {
            let t = g.reshape(t, &[b, s, h, dh])?;
            g.permute(t, &[0, 2, 1, 3])
        };
        let q = self.query.forward(g, x)?;
        let q = split_heads(g, q)?;
        let k = self.key.forward(g, x)?;
        let k = split_heads(g, k)?;
        let v = self.value.forward(g, x)?;
        let v = split_heads(g, v)?;

        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = g.masked_softmax_rows(scores, &batch.mask)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, s, cfg.d_model])?;
        let attn = self.output.forward(g, ctx)?;
        let attn = dropout(g, attn, cfg.dropout_rate, mode, rng)?;
        let x = g.add(x, attn)?;
        let x = self.attention_norm.forward(g, x)?;

        let f = self.ff_in.forward(g, x)?;
        let f = g.gelu(f);
        let f = self.ff_out.forward(g, f)?;
        let f = dropout(g, f, cfg.dropout_rate, mode, rng)?;
        let x = g.add(x, f)?;
        self.ff_norm.forward(g, x)
    }
}

impl Module for EncoderLayer {
    fn parameters(&self) -> Vec<&Parameter> {
        [
            self.query.parameters(),
            self.key.parameters(),
            self.value.parameters(),
            self.output.parameters(),
            self.attention_norm.parameters(),
            self.ff_in.parameters(),
            self.ff_out.parameters(),
            self.ff_norm.parameters(),
        ]
        .concat()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.query.parameters_mut();
        out.extend(self.key.parameters_mut());
        out.extend(self.value.parameters_mut());
        out.extend(self.output.parameters_mut());
        out.extend(self.attention_norm.parameters_mut());
        out.extend(self.ff_in.parameters_mut());
        out.extend(self.ff_out.parameters_mut());
        out.extend(self.ff_norm.parameters_mut());
        out
    }
}

/// Inverted dropout; identity in eval mode or at rate 0 (no RNG draws).
fn dropout(g: &mut Graph, x: NodeId, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<NodeId> {
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Tensor::zeros(g.shape(x));
    for m in mask.data_mut() {
        *m = if rng.random::<f64>() < rate { 0.0 } else { keep };
    }
    let mask = g.constant(mask);
    g.mul(x, mask)
}

/// A tensor summed into the hidden state of layer `layer` (0 = embedding
/// output) before the next layer consumes it.
#[derive(Clone, Copy, Debug)]
pub struct Injection {
    pub layer: usize,
    pub value: NodeId,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: NodeId,
    /// `hidden[0]` is the embedding output, `hidden[l]` the output of layer
    /// `l`; an injected layer holds the post-injection sum.
    pub hidden: Vec<NodeId>,
    /// Head input: pooled final hidden state.
    pub pooled: NodeId,
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: ModelConfig,
    pub token_embedding: Parameter,
    pub position_embedding: Parameter,
    pub embedding_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub classifier: Linear,
}

impl EncoderModel {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let token_embedding =
            Parameter::normal("embeddings.token", &[config.vocab_size, d], INIT_STD, &mut rng);
        let position_embedding =
            Parameter::normal("embeddings.position", &[config.max_seq_len, d], INIT_STD, &mut rng);
        let embedding_norm = LayerNorm::new("embeddings.norm", d);
        let layers = (0..config.n_layers)
            .map(|l| EncoderLayer::new(&format!("layers.{l}"), &config, &mut rng))
            .collect();
        let classifier = Linear::new("classifier", d, config.head.outputs(), &mut rng);
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            embedding_norm,
            layers,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.config.head
    }

    /// Full forward pass. Dropout draws come from `rng` in train mode only.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: &Batch,
        mode: Mode,
        injection: Option<Injection>,
        rng: &mut dyn RngCore,
    ) -> Result<ModelOutput> {
        let cfg = &self.config;
        let (b, s) = (batch.batch_size, batch.seq_len);
        if s > cfg.max_seq_len {
            return Err(Error::Config(format!(
                "batch sequence length {s} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        if let Some(inj) = injection {
            if inj.layer > cfg.n_layers {
                return Err(Error::IndexOutOfRange {
                    what: "injection layer",
                    index: inj.layer,
                    size: cfg.n_layers + 1,
                });
            }
            let want = [b, s, cfg.d_model];
            if g.shape(inj.value) != want {
                return Err(Error::shape("injection", g.shape(inj.value), &want));
            }
        }
        let inject = |g: &mut Graph, layer: usize, h: NodeId| -> Result<NodeId> {
            match injection {
                Some(inj) if inj.layer == layer => g.add(h, inj.value),
                _ => Ok(h),
            }
        };

        let tok_table = g.param(&self.token_embedding);
        let tokens = g.gather_rows(tok_table, &batch.token_ids, &[b, s])?;
        let pos_table = g.param(&self.position_embedding);
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
        let pos = g.gather_rows(pos_table, &positions, &[b, s])?;
        let x = g.add(tokens, pos)?;
        let x = self.embedding_norm.forward(g, x)?;
        let x = dropout(g, x, cfg.dropout_rate, mode, rng)?;
        let mut h = inject(g, 0, x)?;

        let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
        hidden.push(h);
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h, batch, cfg, mode, rng)?;
            h = inject(g, l + 1, h)?;
            hidden.push(h);
        }
        let pooled = pool(g, h, &batch.mask, cfg.pooling)?;
        let logits = self.classifier.forward(g, pooled)?;
        Ok(ModelOutput {
            logits,
            hidden,
            pooled,
        })
    }

    /// Copies parameter values from `other` (same config required).
    pub fn copy_values_from(&mut self, other: &EncoderModel) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Config("cannot copy between different model configs".into()));
        }
        for (dst, src) in self.parameters_mut().into_iter().zip(other.parameters()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

impl Module for EncoderModel {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.token_embedding, &self.position_embedding];
        out.extend(self.embedding_norm.parameters());
        for l in &self.layers {
            out.extend(l.parameters());
        }
        out.extend(self.classifier.parameters());
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        out.extend(self.embedding_norm.parameters_mut());
        for l in &mut self.layers {
            out.extend(l.parameters_mut());
        }
        out.extend(self.classifier.parameters_mut());
        out
    }
}
