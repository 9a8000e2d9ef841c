use crate::error::{Error, Result};
use crate::graph::{redundancy_terms, Graph, NodeId};
use crate::tensor::Tensor;

/// Variance floor added before the square root when standardizing feature
/// columns. Keeps zero-variance columns at exactly zero instead of NaN while
/// leaving already standardized inputs unchanged to ~1e-12.
pub const CONTRASTIVE_EPS: f64 = 1e-12;

#[derive(Debug)]
pub struct ContrastiveOutput {
    pub loss: NodeId,
    /// `M = z̃_aᵀ · z̃_b / batch` of the standardized embeddings.
    pub cross_correlation: Tensor,
    /// `Σ_m (1 − M_mm)²`
    pub invariance: f64,
    /// `Σ_{m≠n} M_mn²` (before λ weighting)
    pub redundancy: f64,
}

/// Redundancy-reduction loss between two `[batch, p]` embeddings.
///
/// Each feature column of both inputs is standardized across the batch
/// (population variance plus [`CONTRASTIVE_EPS`]); then
/// `loss = Σ_m (1 − M_mm)² + λ · Σ_{m≠n} M_mn²`.
pub fn contrastive_loss(
    g: &mut Graph,
    z_a: NodeId,
    z_b: NodeId,
    lambda_offdiag: f64,
) -> Result<ContrastiveOutput> {
    let (sa, sb) = (g.shape(z_a).to_vec(), g.shape(z_b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape("contrastive_loss", &sa, &sb));
    }
    let batch = sa[0];
    if batch < 2 {
        return Err(Error::Config(
            "contrastive loss is undefined for a batch of one".into(),
        ));
    }
    let na = g.batch_norm_features(z_a, CONTRASTIVE_EPS)?;
    let nb = g.batch_norm_features(z_b, CONTRASTIVE_EPS)?;
    let na_t = g.transpose(na)?;
    let m = g.matmul(na_t, nb)?;
    let m = g.scale(m, 1.0 / batch as f64);
    let cross_correlation = g.value(m).clone();
    let (invariance, redundancy) = redundancy_terms(&cross_correlation)?;
    let loss = g.redundancy_loss(m, lambda_offdiag)?;
    Ok(ContrastiveOutput {
        loss,
        cross_correlation,
        invariance,
        redundancy,
    })
}
