//! Feature statistics: splitting a feature map into its normalized content
//! and its per-channel (mean, std) style, and re-styling one sample with the
//! statistics of another.
//!
//! Statistics are per sample and per channel over the spatial axes only, with
//! `sigma = sqrt(population variance + eps)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CdnError, Result};
use crate::tensor::Tensor;

/// Default variance floor added inside the square root.
pub const DEFAULT_EPS: f64 = 1e-5;

/// A finite `(N, C, H, W)` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let (n, c, h, w) = values.dims4()?;
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(CdnError::invalid(format!("empty feature map {:?}", values.shape())));
        }
        if !values.is_finite() {
            return Err(CdnError::invalid("feature map contains non-finite values"));
        }
        Ok(FeatureMap(values))
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Per-sample, per-channel mean and standard deviation, both `(N, C)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainStats {
    pub mu: Tensor,
    pub sigma: Tensor,
}

impl DomainStats {
    pub fn new(mu: Tensor, sigma: Tensor) -> Result<Self> {
        mu.dims2()?;
        sigma.expect_shape(mu.shape())?;
        if !mu.is_finite() || !sigma.is_finite() {
            return Err(CdnError::invalid("non-finite domain statistics"));
        }
        if sigma.data().iter().any(|&s| s <= 0.0) {
            return Err(CdnError::invalid("sigma must be strictly positive"));
        }
        Ok(DomainStats { mu, sigma })
    }
}

/// Channel-normalized content of a feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct IntrinsicFeature(Tensor);

impl IntrinsicFeature {
    pub fn new(values: Tensor) -> Result<Self> {
        Ok(IntrinsicFeature(FeatureMap::new(values)?.into_tensor()))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Mean and `sqrt(var + eps)` of one spatial plane.
pub(crate) fn plane_stats(plane: &[f64], eps: f64) -> (f64, f64) {
    let l = plane.len() as f64;
    let mu = plane.iter().sum::<f64>() / l;
    let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / l;
    (mu, (var + eps).sqrt())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(CdnError::invalid(format!("eps must be finite and non-negative, got {eps}")));
    }
    Ok(())
}

pub fn channel_stats(z: &FeatureMap, eps: f64) -> Result<DomainStats> {
    check_eps(eps)?;
    let (n, c, h, w) = z.dims();
    let l = h * w;
    let mut mu = Tensor::zeros(&[n, c]);
    let mut sigma = Tensor::zeros(&[n, c]);
    for (k, plane) in z.tensor().data().chunks_exact(l).enumerate() {
        let (m, s) = plane_stats(plane, eps);
        mu.data_mut()[k] = m;
        sigma.data_mut()[k] = s;
    }
    // eps = 0 on a constant plane gives sigma = 0, which is a valid statistic
    // but not a valid normalizer; callers that divide check separately.
    Ok(DomainStats { mu, sigma })
}

fn require_positive_sigma(stats: &DomainStats) -> Result<()> {
    if stats.sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(CdnError::invalid("zero channel std; use eps > 0"));
    }
    Ok(())
}

pub fn decompose(z: &FeatureMap, eps: f64) -> Result<(IntrinsicFeature, DomainStats)> {
    let stats = channel_stats(z, eps)?;
    require_positive_sigma(&stats)?;
    let (_, _, h, w) = z.dims();
    let mut out = z.tensor().clone();
    for (k, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let (m, s) = (stats.mu.data()[k], stats.sigma.data()[k]);
        plane.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok((IntrinsicFeature(out), stats))
}

pub fn recompose(i: &IntrinsicFeature, d: &DomainStats) -> Result<FeatureMap> {
    let (n, c, h, w) = i.tensor().dims4()?;
    d.mu.expect_shape(&[n, c])?;
    d.sigma.expect_shape(&[n, c])?;
    let mut out = i.tensor().clone();
    for (k, plane) in out.data_mut().chunks_exact_mut(h * w).enumerate() {
        let (m, s) = (d.mu.data()[k], d.sigma.data()[k]);
        plane.iter_mut().for_each(|v| *v = s * *v + m);
    }
    FeatureMap::new(out)
}

/// Re-styles each sample of `z_a` with the statistics of the matching sample
/// of `z_b`: `sigma_b * (z_a - mu_a) / sigma_a + mu_b`.
pub fn domain_transform(z_a: &FeatureMap, z_b: &FeatureMap, eps: f64) -> Result<FeatureMap> {
    z_a.tensor().expect_shape(z_b.tensor().shape())?;
    let (intrinsic, _) = decompose(z_a, eps)?;
    let target = channel_stats(z_b, eps)?;
    recompose(&intrinsic, &target)
}

/// Source/partner index pairs chosen for one batch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing {
    pub pairs: Vec<(usize, usize)>,
}

impl Pairing {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Partner index for every sample; untouched samples map to themselves.
    pub fn partner_of(&self, batch: usize) -> Vec<usize> {
        let mut partner: Vec<usize> = (0..batch).collect();
        for &(s, p) in &self.pairs {
            partner[s] = p;
        }
        partner
    }
}

/// `ceil(alpha * n)`, robust to the rounding error in the product.
pub fn transformed_count(alpha: f64, n: usize) -> usize {
    let raw = alpha * n as f64;
    let count = (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize;
    count.min(n)
}

/// Chooses which samples get re-styled and by whom.
///
/// The first `ceil(alpha * N)` indices of a seeded shuffle become sources.
/// Each source draws its partner uniformly from other-domain samples not yet
/// used as a partner; when that pool runs dry, it draws from all other-domain
/// samples again.
pub fn plan_pairing<R: Rng>(domain_ids: &[u32], alpha: f64, rng: &mut R) -> Result<Pairing> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CdnError::invalid(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let n = domain_ids.len();
    let count = transformed_count(alpha, n);
    if count == 0 {
        return Ok(Pairing::default());
    }
    let first = domain_ids[0];
    if domain_ids.iter().all(|&d| d == first) {
        return Err(CdnError::DegenerateBatch(format!(
            "alpha = {alpha} needs at least two distinct domains in the batch"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut used = vec![false; n];
    let mut pairs = Vec::with_capacity(count);
    for &src in &order[..count] {
        let others: Vec<usize> = (0..n).filter(|&j| domain_ids[j] != domain_ids[src]).collect();
        let fresh: Vec<usize> = others.iter().copied().filter(|&j| !used[j]).collect();
        let pool = if fresh.is_empty() { &others } else { &fresh };
        let partner = pool[rng.random_range(0..pool.len())];
        used[partner] = true;
        pairs.push((src, partner));
    }
    Ok(Pairing { pairs })
}

/// Applies a pairing: sources are replaced by their transform toward the
/// partner, every other sample is copied through.
pub fn apply_pairing(batch: &FeatureMap, pairing: &Pairing, eps: f64) -> Result<FeatureMap> {
    check_eps(eps)?;
    let (n, c, h, w) = batch.dims();
    let l = h * w;
    let src = batch.tensor();
    let mut out = src.clone();
    for &(s, p) in &pairing.pairs {
        if s >= n || p >= n {
            return Err(CdnError::invalid(format!("pair ({s}, {p}) out of range for batch {n}")));
        }
        for ch in 0..c {
            let off_s = (s * c + ch) * l;
            let off_p = (p * c + ch) * l;
            let (mu_s, sig_s) = plane_stats(&src.data()[off_s..off_s + l], eps);
            let (mu_p, sig_p) = plane_stats(&src.data()[off_p..off_p + l], eps);
            if sig_s <= 0.0 {
                return Err(CdnError::invalid("zero channel std; use eps > 0"));
            }
            let dst = &mut out.data_mut()[off_s..off_s + l];
            for (o, &v) in dst.iter_mut().zip(&src.data()[off_s..off_s + l]) {
                *o = sig_p * (v - mu_s) / sig_s + mu_p;
            }
        }
    }
    FeatureMap::new(out)
}

/// Re-styles `ceil(alpha * N)` samples of a batch toward randomly chosen
/// samples of a different domain.
pub fn batch_domain_mix(
    batch: &FeatureMap,
    domain_ids: &[u32],
    alpha: f64,
    seed: u64,
    eps: f64,
) -> Result<(FeatureMap, Pairing)> {
    let (n, ..) = batch.dims();
    if domain_ids.len() != n {
        return Err(CdnError::invalid(format!(
            "{} domain ids for a batch of {n}",
            domain_ids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairing = plan_pairing(domain_ids, alpha, &mut rng)?;
    let mixed = apply_pairing(batch, &pairing, eps)?;
    Ok((mixed, pairing))
}
