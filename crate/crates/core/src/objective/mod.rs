//! The self-augmented second stream and the combined training objective.
//!
//! Stream F is a plain encoder. Stream C is a copy of F whose hidden state
//! at layer `layer_j` is replaced by its element-wise sum with F's hidden
//! state at layer `layer_i`. Both streams are classified, and their pooled
//! tapped states (F at `layer_i`, C at `layer_j` after the sum) go through a
//! shared projection network into a redundancy-reduction loss. The total is
//!
//! ```text
//! total = (1 − α)/2 · (ce_f + ce_c) + α · contrastive
//! ```

mod contrastive;
mod projection;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Targets};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{pool, EncoderModel, Injection, Mode, ModelOutput, Pooling};
use crate::tensor::Tensor;

pub use contrastive::{contrastive_loss, ContrastiveOutput, CONTRASTIVE_EPS};
pub use projection::{ProjectionLayer, ProjectionNetwork};

/// Whether C's losses may send gradient back into F through the injected
/// hidden state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientFlow {
    /// The injected state is a constant for C's backward pass.
    #[default]
    Stop,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DualStreamConfig {
    /// Tap layer in F (0 = embedding output).
    pub layer_i: usize,
    /// Injection layer in C.
    pub layer_j: usize,
    pub alpha: f64,
    pub augment_gradient: GradientFlow,
    /// Pooling applied to the tapped states before projection.
    pub pooling: Pooling,
    /// Off-diagonal weight λ of the redundancy-reduction loss.
    pub lambda_offdiag: f64,
    pub projection_dims: Vec<usize>,
    /// Run C with F's parameters instead of its own copy.
    pub tie_weights: bool,
    /// Inject zeros instead of F's hidden state (ablation/testing knob).
    pub zero_injection: bool,
}

impl Default for DualStreamConfig {
    fn default() -> Self {
        Self {
            layer_i: 0,
            layer_j: 0,
            alpha: 0.1,
            augment_gradient: GradientFlow::Stop,
            pooling: Pooling::Cls,
            lambda_offdiag: 0.005,
            projection_dims: vec![1024, 1024, 300],
            tie_weights: false,
            zero_injection: false,
        }
    }
}

impl DualStreamConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.layer_i > n_layers || self.layer_j > n_layers {
            return Err(Error::Config(format!(
                "layer_i {} / layer_j {} must lie in [0, {n_layers}]",
                self.layer_i, self.layer_j
            )));
        }
        check_alpha(self.alpha)?;
        if !(self.lambda_offdiag > 0.0) {
            return Err(Error::Config(format!(
                "lambda_offdiag must be positive, got {}",
                self.lambda_offdiag
            )));
        }
        if self.projection_dims.is_empty() || self.projection_dims.contains(&0) {
            return Err(Error::Config("projection_dims must be non-empty and positive".into()));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    Ok(())
}

#[derive(Debug)]
pub struct DualOutput {
    pub stream_f: ModelOutput,
    pub stream_c: ModelOutput,
    /// Pooled H_i from F.
    pub pooled_i: NodeId,
    /// Pooled post-injection H_j from C.
    pub pooled_j: NodeId,
}

/// Runs F, then C with F's layer-`layer_i` state injected at `layer_j`.
#[allow(clippy::too_many_arguments)]
pub fn dual_forward(
    g: &mut Graph,
    model_f: &EncoderModel,
    model_c: &EncoderModel,
    batch: &Batch,
    cfg: &DualStreamConfig,
    mode: Mode,
    rng_f: &mut dyn RngCore,
    rng_c: &mut dyn RngCore,
) -> Result<DualOutput> {
    if model_f.config() != model_c.config() {
        return Err(Error::Config("streams F and C must share a model config".into()));
    }
    if mode == Mode::Train && batch.batch_size < 2 {
        return Err(Error::Config("dual-stream training needs batches of at least 2".into()));
    }
    cfg.validate(model_f.config().n_layers)?;
    let stream_f = model_f.forward(g, batch, mode, None, rng_f)?;
    let h_i = stream_f.hidden[cfg.layer_i];
    let injected = if cfg.zero_injection {
        g.constant(Tensor::zeros(g.shape(h_i)))
    } else {
        match cfg.augment_gradient {
            GradientFlow::Stop => g.detach(h_i),
            GradientFlow::Flow => h_i,
        }
    };
    let c = if cfg.tie_weights { model_f } else { model_c };
    let stream_c = c.forward(
        g,
        batch,
        mode,
        Some(Injection {
            layer: cfg.layer_j,
            value: injected,
        }),
        rng_c,
    )?;
    let pooled_i = pool(g, h_i, &batch.mask, cfg.pooling)?;
    let pooled_j = pool(g, stream_c.hidden[cfg.layer_j], &batch.mask, cfg.pooling)?;
    Ok(DualOutput {
        stream_f,
        stream_c,
        pooled_i,
        pooled_j,
    })
}

/// Cross-entropy for single-label targets, per-label binary cross-entropy
/// for multi-label targets.
pub fn classification_loss(g: &mut Graph, logits: NodeId, targets: &Targets) -> Result<NodeId> {
    match targets {
        Targets::Classes(c) => g.cross_entropy(logits, c),
        Targets::MultiHot(t) => g.bce_with_logits(logits, t),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub ce_f: f64,
    pub ce_c: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Scalar form of the weighted objective.
pub fn composite_loss(ce_f: f64, ce_c: f64, contrastive: f64, alpha: f64) -> Result<StepLosses> {
    check_alpha(alpha)?;
    Ok(StepLosses {
        ce_f,
        ce_c,
        contrastive,
        total: (1.0 - alpha) / 2.0 * (ce_f + ce_c) + alpha * contrastive,
    })
}

/// Graph form of [`composite_loss`]; produces the same value bit for bit.
/// `contrastive = None` stands for a zero contrastive term.
pub fn composite_loss_node(
    g: &mut Graph,
    ce_f: NodeId,
    ce_c: NodeId,
    contrastive: Option<NodeId>,
    alpha: f64,
) -> Result<NodeId> {
    check_alpha(alpha)?;
    let ce = g.add(ce_f, ce_c)?;
    let ce = g.scale(ce, (1.0 - alpha) / 2.0);
    match contrastive {
        Some(lc) => {
            let lc = g.scale(lc, alpha);
            g.add(ce, lc)
        }
        None => Ok(ce),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composite_examples() {
        let s = composite_loss(1.0, 0.6, 2.0, 0.4).unwrap();
        assert!((s.total - 1.28).abs() < 1e-15);
        let s = composite_loss(1.0, 0.6, 2.0, 0.0).unwrap();
        assert_eq!(s.total, 0.8);
        let s = composite_loss(1.0, 0.6, 2.0, 1.0).unwrap();
        assert_eq!(s.total, 2.0);
        assert!(composite_loss(1.0, 1.0, 1.0, 1.5).is_err());
        assert!(composite_loss(1.0, 1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn graph_and_scalar_forms_agree_bitwise() {
        for &alpha in &[0.0, 0.1, 0.37, 0.5, 1.0] {
            let mut g = Graph::new();
            let a = g.leaf(Tensor::scalar(0.731), true);
            let b = g.leaf(Tensor::scalar(1.913), true);
            let c = g.leaf(Tensor::scalar(12.25), true);
            let t = composite_loss_node(&mut g, a, b, Some(c), alpha).unwrap();
            let s = composite_loss(0.731, 1.913, 12.25, alpha).unwrap();
            assert_eq!(g.value(t).data()[0].to_bits(), s.total.to_bits());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = DualStreamConfig::default();
        assert!(c.validate(2).is_ok());
        c.layer_j = 3;
        assert!(c.validate(2).is_err());
        c.layer_j = 2;
        c.lambda_offdiag = 0.0;
        assert!(c.validate(2).is_err());
    }
}
