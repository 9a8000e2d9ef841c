use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{column_moments, Graph, NodeId};
use crate::model::{Linear, Mode};
use crate::param::{Module, Parameter};
use crate::tensor::Tensor;

/// Affine map, per-feature batch normalization (learned gain and bias), and
/// ReLU except on the last layer.
#[derive(Clone, Debug)]
pub struct ProjectionLayer {
    pub linear: Linear,
    pub norm_gain: Parameter,
    pub norm_bias: Parameter,
    /// Population statistics tracked in train mode, used in eval mode.
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub activation: bool,
}

/// MLP shared by both streams ahead of the contrastive loss.
#[derive(Clone, Debug)]
pub struct ProjectionNetwork {
    pub layers: Vec<ProjectionLayer>,
    pub eps: f64,
    pub momentum: f64,
}

impl ProjectionNetwork {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(input_dim: usize, dims: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || dims.is_empty() || dims.contains(&0) {
            return Err(Error::Config(format!(
                "invalid projection dims {input_dim} -> {dims:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = input_dim;
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let name = format!("projection.{i}");
                let layer = ProjectionLayer {
                    linear: Linear::new(&name, prev, d, &mut rng),
                    norm_gain: Parameter::ones(format!("{name}.norm.gain"), &[d]),
                    norm_bias: Parameter::zeros(format!("{name}.norm.bias"), &[d]),
                    running_mean: vec![0.0; d],
                    running_var: vec![1.0; d],
                    activation: i + 1 < dims.len(),
                };
                prev = d;
                layer
            })
            .collect();
        Ok(Self {
            layers,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.norm_gain.value.len())
    }

    /// Projects pooled `[batch, d_model]` states. Train mode normalizes with
    /// batch statistics (and needs `batch >= 2`); eval mode uses the running
    /// statistics.
    pub fn project(&mut self, g: &mut Graph, pooled: NodeId, mode: Mode) -> Result<NodeId> {
        let eps = self.eps;
        let momentum = self.momentum;
        let mut h = pooled;
        for layer in &mut self.layers {
            h = layer.linear.forward(g, h)?;
            h = match mode {
                Mode::Train => {
                    let normed = g.batch_norm_features(h, eps)?;
                    let (mean, var) = column_moments(g.value(h));
                    for (r, m) in layer.running_mean.iter_mut().zip(&mean) {
                        *r = (1.0 - momentum) * *r + momentum * m;
                    }
                    for (r, v) in layer.running_var.iter_mut().zip(&var) {
                        *r = (1.0 - momentum) * *r + momentum * v;
                    }
                    normed
                }
                Mode::Eval => {
                    let d = layer.running_mean.len();
                    let shift = g.constant(Tensor::new(
                        vec![d],
                        layer.running_mean.iter().map(|m| -m).collect(),
                    )?);
                    let scale = g.constant(Tensor::new(
                        vec![d],
                        layer.running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect(),
                    )?);
                    let centered = g.add_bias(h, shift)?;
                    g.mul_bias(centered, scale)?
                }
            };
            let gain = g.param(&layer.norm_gain);
            let bias = g.param(&layer.norm_bias);
            h = g.mul_bias(h, gain)?;
            h = g.add_bias(h, bias)?;
            if layer.activation {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

impl Module for ProjectionNetwork {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.linear.parameters());
            out.push(&l.norm_gain);
            out.push(&l.norm_bias);
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.extend(l.linear.parameters_mut());
            out.push(&mut l.norm_gain);
            out.push(&mut l.norm_bias);
        }
        out
    }
}
