use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::param::{Module, Parameter};

const INIT_STD: f64 = 0.02;

/// `y = x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: Parameter::normal(format!("{name}.weight"), &[input, output], INIT_STD, rng),
            bias: Parameter::zeros(format!("{name}.bias"), &[output]),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

impl Module for Linear {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-12;

    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gain: Parameter::ones(format!("{name}.gain"), &[d]),
            bias: Parameter::zeros(format!("{name}.bias"), &[d]),
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

impl Module for LayerNorm {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.gain, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gain, &mut self.bias]
    }
}
