//! Training objectives: denoising reconstruction, intrinsic (content)
//! alignment, domain (statistics) alignment, the real/fake boundary
//! constraint, and binary cross-entropy, plus their weighted combination.
//!
//! Every loss comes in two forms: a graph builder used during training, and
//! where it makes sense a plain value function for direct use.

use serde::{Deserialize, Serialize};

use crate::error::{CdnError, Result};
use crate::graph::{bce_value, boundary_of, Graph, Var};
use crate::tensor::Tensor;

/// Probability clamp used by the cross-entropy.
pub const SCORE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Denoising reconstruction.
    pub lambda_d: f64,
    /// Intrinsic (content) alignment.
    pub lambda_i: f64,
    /// Domain (statistics) alignment.
    pub lambda_s: f64,
    /// Real/fake boundary constraint; 0 disables it.
    pub lambda_b: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_d: 0.1, lambda_i: 0.1, lambda_s: 0.1, lambda_b: 0.0 }
    }
}

impl LossWeights {
    /// Weight used for the boundary term when it is switched on.
    pub const BOUNDARY_ON: f64 = 0.1;

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_i", self.lambda_i),
            ("lambda_s", self.lambda_s),
            ("lambda_b", self.lambda_b),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(CdnError::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn boundary_enabled(&self) -> bool {
        self.lambda_b > 0.0
    }

    /// True when any of the desensitization terms is active.
    pub fn desensitization_enabled(&self) -> bool {
        self.lambda_d > 0.0 || self.lambda_i > 0.0 || self.lambda_s > 0.0
    }
}

/// Per-term loss values and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub d: f64,
    pub i: f64,
    pub s: f64,
    pub b: f64,
    pub total: f64,
}

/// Assembles the weighted total from unweighted parts.
///
/// The boundary term only contributes when `lambda_b > 0`.
pub fn total_loss(cls: f64, d: f64, i: f64, s: f64, b: f64, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    for (name, v) in [("cls", cls), ("d", d), ("i", i), ("s", s), ("b", b)] {
        if !v.is_finite() {
            return Err(CdnError::TrainingDivergence { step: 0, detail: format!("loss term {name} = {v}") });
        }
    }
    let mut total = cls + w.lambda_d * d + w.lambda_i * i + w.lambda_s * s;
    if w.boundary_enabled() {
        total += w.lambda_b * b;
    }
    Ok(LossBreakdown { cls, d, i, s, b, total })
}

/// `0.5 * (1 - <x/|x|, y/|y|>)`, in `[0, 1]`.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CdnError::invalid(format!("vectors of length {} and {}", x.len(), y.len())));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(CdnError::invalid("cosine distance of a zero vector"));
    }
    let cos = x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / (nx * ny);
    Ok((0.5 * (1.0 - cos)).clamp(0.0, 1.0))
}

fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) {
        return Err(CdnError::invalid("representations of unequal length"));
    }
    Tensor::new(vec![rows.len(), d], rows.concat())
}

/// Mean real-real cosine distance minus mean real-fake cosine distance,
/// normalized by `N_r^2` and `N_r * N_f` (diagonal pairs included).
pub fn boundary_loss(real_reps: &[Vec<f64>], fake_reps: &[Vec<f64>]) -> Result<f64> {
    if real_reps.len() < 2 || fake_reps.is_empty() {
        return Err(CdnError::invalid(format!(
            "boundary loss needs >= 2 reals and >= 1 fake, got {} and {}",
            real_reps.len(),
            fake_reps.len()
        )));
    }
    let r = rows_to_tensor(real_reps)?;
    let f = rows_to_tensor(fake_reps)?;
    if r.shape()[1] != f.shape()[1] {
        return Err(CdnError::invalid("real and fake representations differ in width"));
    }
    boundary_of(&r, &f)
}

/// Mean binary cross-entropy with scores clamped to `[1e-7, 1 - 1e-7]`.
pub fn classification_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CdnError::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    Ok(bce_value(scores, &y, SCORE_CLAMP))
}

/// Mean squared error between the decoded mixture and the source image.
pub fn denoising_reconstruction_loss(g: &mut Graph, reconstruction: Var, x_a: Var) -> Result<Var> {
    let diff = g.sub(reconstruction, x_a)?;
    Ok(g.mean_square(diff))
}

/// Mean squared error between the re-encoded reconstruction and the mixed
/// latent. The latent enters as a detached target.
pub fn intrinsic_loss(g: &mut Graph, reencoded: Var, z_out: Var) -> Result<Var> {
    let shape = g.value(z_out).shape().to_vec();
    g.value(reencoded).expect_shape(&shape)?;
    let target = g.detach(z_out);
    let diff = g.sub(reencoded, target)?;
    Ok(g.mean_square(diff))
}

/// Sum over tapped layers of the squared distance between per-channel
/// statistics of the style reference and of the reconstruction, averaged
/// over the batch.
pub fn domain_alignment_loss(g: &mut Graph, reference_taps: &[Var], reconstruction_taps: &[Var], eps: f64) -> Result<Var> {
    if reference_taps.is_empty() {
        return Err(CdnError::InvalidConfig("domain alignment needs at least one tapped layer".into()));
    }
    if reference_taps.len() != reconstruction_taps.len() {
        return Err(CdnError::invalid("reference and reconstruction tap counts differ"));
    }
    let mut terms = Vec::with_capacity(2 * reference_taps.len());
    for (&r, &x) in reference_taps.iter().zip(reconstruction_taps) {
        let mu_r = g.channel_mean(r)?;
        let mu_x = g.channel_mean(x)?;
        let sd_r = g.channel_std(r, eps)?;
        let sd_x = g.channel_std(x, eps)?;
        let dm = g.sub(mu_r, mu_x)?;
        let ds = g.sub(sd_r, sd_x)?;
        terms.push((g.squared_norm_mean(dm), 1.0));
        terms.push((g.squared_norm_mean(ds), 1.0));
    }
    g.weighted_sum(&terms)
}
