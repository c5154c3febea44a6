//! Toy convolutional encoder, mirrored decoder, momentum copy of the encoder
//! and a pooled-feature classifier head.
//!
//! Encoder stage `s` is `relu(conv_k(stride))`. The decoder mirrors it:
//! nearest 2x upsampling (when the encoder downsamples), a stride-1 conv, and
//! ReLU on every layer except the last, which emits raw pixels. The
//! classifier reads encoder stage 1 and decoder stages 1 and 2.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CdnError, Result};
use crate::feature_stats::{FeatureMap, Pairing};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    /// Square input side length.
    pub image_size: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    /// 2 halves the resolution per stage, 1 keeps it.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Width of the classifier's hidden layer.
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
}

fn default_kernel() -> usize {
    3
}
fn default_stride() -> usize {
    2
}
fn default_head_hidden() -> usize {
    16
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            stage_channels: vec![8, 16, 32],
            image_size: 64,
            kernel_size: 3,
            stride: 2,
            head_hidden: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() < 2 {
            return Err(CdnError::InvalidConfig("the encoder needs at least two stages".into()));
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) || self.head_hidden == 0 {
            return Err(CdnError::InvalidConfig("channel counts must be positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(CdnError::InvalidConfig("kernel size must be odd".into()));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(CdnError::InvalidConfig("stride must be 1 or 2".into()));
        }
        let down = self.stride.pow(self.stage_channels.len() as u32);
        if self.image_size == 0 || self.image_size % down != 0 {
            return Err(CdnError::InvalidConfig(format!(
                "image size {} is not divisible by the total downsampling {down}",
                self.image_size
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial side of encoder stage `s` (1-based).
    pub fn stage_size(&self, s: usize) -> usize {
        self.image_size / self.stride.pow(s as u32)
    }

    /// Channels feeding decoder layer `j` (1-based) and leaving it.
    fn decoder_channels(&self, j: usize) -> (usize, usize) {
        let s = self.stages();
        let c = |k: usize| if k == 0 { self.in_channels } else { self.stage_channels[k - 1] };
        (c(s + 1 - j), c(s - j))
    }

    /// Width of the pooled classifier embedding.
    pub fn embedding_dim(&self) -> usize {
        self.stage_channels[0] + self.decoder_channels(1).1 + self.decoder_channels(2).1
    }
}

/// An ordered list of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn push(&mut self, name: String, t: Tensor) {
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.len() == other.len() && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Puts every tensor on the graph as a leaf.
    pub fn to_graph(&self, g: &mut Graph, needs_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), needs_grad)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Classifier output in `[0, 1]`; higher means more likely forged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForgeryScore(f64);

impl ForgeryScore {
    pub fn new(value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(CdnError::invalid(format!("score {value} outside [0, 1]")));
        }
        Ok(ForgeryScore(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Every parameter set of the model plus the layers where domain mixing is
/// applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub config: EncoderConfig,
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub momentum: ParamSet,
    pub classifier: ParamSet,
    /// 1-based encoder stages that receive domain mixing.
    pub layer_taps: Vec<usize>,
}

fn he_tensor(shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

impl ModelBundle {
    /// Randomly initialized bundle; the momentum encoder starts as a copy of
    /// the encoder.
    pub fn init(config: EncoderConfig, layer_taps: Vec<usize>, seed: u64) -> Result<Self> {
        config.validate()?;
        validate_taps(&layer_taps, &config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = config.kernel_size;

        let mut encoder = ParamSet { names: vec![], tensors: vec![] };
        let mut c_in = config.in_channels;
        for (s, &c_out) in config.stage_channels.iter().enumerate() {
            encoder.push(format!("enc.{}.w", s + 1), he_tensor(&[c_out, c_in, k, k], c_in * k * k, 1.0, &mut rng));
            encoder.push(format!("enc.{}.b", s + 1), Tensor::zeros(&[c_out]));
            c_in = c_out;
        }

        let mut decoder = ParamSet { names: vec![], tensors: vec![] };
        for j in 1..=config.stages() {
            let (ci, co) = config.decoder_channels(j);
            let gain = if j == config.stages() { 0.5 } else { 1.0 };
            decoder.push(format!("dec.{j}.w"), he_tensor(&[co, ci, k, k], ci * k * k, gain, &mut rng));
            decoder.push(format!("dec.{j}.b"), Tensor::zeros(&[co]));
        }

        let e = config.embedding_dim();
        let h = config.head_hidden;
        let mut classifier = ParamSet { names: vec![], tensors: vec![] };
        classifier.push("head.0.w".into(), he_tensor(&[e, h], e, 1.0, &mut rng));
        classifier.push("head.0.b".into(), Tensor::zeros(&[h]));
        classifier.push("head.1.w".into(), he_tensor(&[h, 1], h, 0.5, &mut rng));
        classifier.push("head.1.b".into(), Tensor::zeros(&[1]));

        Ok(ModelBundle { momentum: encoder.clone(), config, encoder, decoder, classifier, layer_taps })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        validate_taps(&self.layer_taps, &self.config)?;
        if !self.encoder.same_shapes(&self.momentum) {
            return Err(CdnError::InvalidModel("momentum encoder shapes differ from the encoder".into()));
        }
        Ok(())
    }
}

fn validate_taps(taps: &[usize], config: &EncoderConfig) -> Result<()> {
    if taps.is_empty() {
        return Err(CdnError::InvalidConfig("layer_taps must be nonempty".into()));
    }
    if taps.iter().any(|&t| t == 0 || t > config.stages().min(2)) {
        return Err(CdnError::InvalidConfig(format!("layer taps {taps:?} must be a subset of {{1, 2}}")));
    }
    Ok(())
}

/// Domain mixing to apply inside an encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct MixPlan<'a> {
    pub pairing: &'a Pairing,
    pub taps: &'a [usize],
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct EncoderPass {
    /// Output of every stage (after mixing where it applies).
    pub stages: Vec<Var>,
    pub latent: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderPass {
    /// Hidden activations of decoder layers `1..S-1`.
    pub stages: Vec<Var>,
    pub output: Var,
}

fn check_input(g: &Graph, x: Var, cfg: &EncoderConfig) -> Result<()> {
    let (_, c, h, w) = g.value(x).dims4()?;
    if c != cfg.in_channels || h != cfg.image_size || w != cfg.image_size {
        return Err(CdnError::ShapeMismatch {
            expected: vec![cfg.in_channels, cfg.image_size, cfg.image_size],
            got: vec![c, h, w],
        });
    }
    Ok(())
}

/// Encoder forward pass on the graph. `params` come from
/// [`ParamSet::to_graph`] on an encoder-shaped set.
pub fn encode_graph(g: &mut Graph, x: Var, params: &[Var], cfg: &EncoderConfig, mix: Option<MixPlan<'_>>) -> Result<EncoderPass> {
    check_input(g, x, cfg)?;
    let pad = cfg.kernel_size / 2;
    let mut h = x;
    let mut stages = Vec::with_capacity(cfg.stages());
    for s in 0..cfg.stages() {
        let conv = g.conv2d(h, params[2 * s], params[2 * s + 1], cfg.stride, pad)?;
        h = g.relu(conv);
        if let Some(plan) = mix {
            if plan.taps.contains(&(s + 1)) && !plan.pairing.is_empty() {
                h = g.mix(h, &plan.pairing.pairs, plan.eps)?;
            }
        }
        stages.push(h);
    }
    Ok(EncoderPass { latent: h, stages })
}

/// Decoder forward pass. With `full = false` the final pixel layer is
/// skipped and `output` is the last hidden activation.
pub fn decode_graph(g: &mut Graph, z: Var, params: &[Var], cfg: &EncoderConfig, full: bool) -> Result<DecoderPass> {
    let (_, c, h, w) = g.value(z).dims4()?;
    let side = cfg.stage_size(cfg.stages());
    if c != *cfg.stage_channels.last().unwrap() || h != side || w != side {
        return Err(CdnError::ShapeMismatch {
            expected: vec![*cfg.stage_channels.last().unwrap(), side, side],
            got: vec![c, h, w],
        });
    }
    let pad = cfg.kernel_size / 2;
    let layers = if full { cfg.stages() } else { cfg.stages() - 1 };
    let mut cur = z;
    let mut stages = Vec::new();
    for j in 0..layers {
        let up = if cfg.stride == 2 { g.upsample2x(cur)? } else { cur };
        let conv = g.conv2d(up, params[2 * j], params[2 * j + 1], 1, pad)?;
        if j + 1 == cfg.stages() {
            cur = conv;
        } else {
            cur = g.relu(conv);
            stages.push(cur);
        }
    }
    Ok(DecoderPass { stages, output: cur })
}

/// Pools `[encoder stage 1, decoder stage 1, decoder stage 2]` into an
/// embedding and maps it to a sigmoid score. Returns `(embedding, score)`.
pub fn classify_graph(g: &mut Graph, taps: &[Var], params: &[Var]) -> Result<(Var, Var)> {
    if taps.len() != 3 {
        return Err(CdnError::invalid(format!("classifier needs 3 feature taps, got {}", taps.len())));
    }
    let pooled = taps.iter().map(|&t| g.channel_mean(t)).collect::<Result<Vec<_>>>()?;
    let emb = g.concat(&pooled, 1)?;
    let hidden = g.linear(emb, params[0], params[1])?;
    let hidden = g.relu(hidden);
    let logit = g.linear(hidden, params[2], params[3])?;
    Ok((emb, g.sigmoid(logit)))
}

/// The three classifier taps for a given encoder and decoder pass.
///
/// Decoder stage 2 is the reconstruction itself when the model has only two
/// stages.
pub fn classifier_taps(enc: &EncoderPass, dec: &DecoderPass) -> Result<[Var; 3]> {
    let d1 = *dec.stages.first().ok_or_else(|| CdnError::invalid("decoder produced no hidden stage"))?;
    let d2 = dec.stages.get(1).copied().unwrap_or(dec.output);
    Ok([enc.stages[0], d1, d2])
}

/// Stage activations and latent for a batch of images.
pub fn encode(x: &Tensor, params: &ParamSet, cfg: &EncoderConfig) -> Result<(Vec<FeatureMap>, FeatureMap)> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let pv = params.to_graph(&mut g, false);
    let pass = encode_graph(&mut g, xv, &pv, cfg, None)?;
    let stages = pass.stages.iter().map(|&v| FeatureMap::new(g.value(v).clone())).collect::<Result<Vec<_>>>()?;
    let latent = FeatureMap::new(g.value(pass.latent).clone())?;
    Ok((stages, latent))
}

/// Reconstruction of a batch of latents.
pub fn decode(z: &FeatureMap, params: &ParamSet, cfg: &EncoderConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.constant(z.tensor().clone());
    let pv = params.to_graph(&mut g, false);
    let pass = decode_graph(&mut g, zv, &pv, cfg, true)?;
    Ok(g.value(pass.output).clone())
}

/// Scores from already computed taps.
pub fn classify(taps: &[FeatureMap], params: &ParamSet) -> Result<Vec<ForgeryScore>> {
    let mut g = Graph::new();
    let tv: Vec<Var> = taps.iter().map(|t| g.constant(t.tensor().clone())).collect();
    let pv = params.to_graph(&mut g, false);
    let (_, score) = classify_graph(&mut g, &tv, &pv)?;
    g.value(score).data().iter().map(|&s| ForgeryScore::new(s)).collect()
}

/// Inference: pooled embedding and score for every image of a batch, with
/// no domain mixing.
pub fn embed_and_score(bundle: &ModelBundle, x: &Tensor) -> Result<(Tensor, Vec<ForgeryScore>)> {
    let cfg = &bundle.config;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let ev = bundle.encoder.to_graph(&mut g, false);
    let dv = bundle.decoder.to_graph(&mut g, false);
    let hv = bundle.classifier.to_graph(&mut g, false);
    let enc = encode_graph(&mut g, xv, &ev, cfg, None)?;
    let dec = decode_graph(&mut g, enc.latent, &dv, cfg, cfg.stages() == 2)?;
    let taps = classifier_taps(&enc, &dec)?;
    let (emb, score) = classify_graph(&mut g, &taps, &hv)?;
    let scores = g.value(score).data().iter().map(|&s| ForgeryScore::new(s)).collect::<Result<_>>()?;
    Ok((g.value(emb).clone(), scores))
}

/// `target <- m * target + (1 - m) * online`, elementwise.
pub fn momentum_update(online: &ParamSet, target: &mut ParamSet, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(CdnError::invalid(format!("momentum must be in [0, 1], got {m}")));
    }
    if !online.same_shapes(target) {
        return Err(CdnError::InvalidModel("momentum update between differently shaped parameter sets".into()));
    }
    for (t, o) in target.tensors.iter_mut().zip(&online.tensors) {
        for (tv, &ov) in t.data_mut().iter_mut().zip(o.data()) {
            *tv = m * *tv + (1.0 - m) * ov;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn image(cfg: &EncoderConfig, n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * cfg.in_channels * cfg.image_size * cfg.image_size;
        Tensor::new(
            vec![n, cfg.in_channels, cfg.image_size, cfg.image_size],
            (0..len).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn small() -> EncoderConfig {
        EncoderConfig { stage_channels: vec![4, 6, 8], image_size: 16, ..Default::default() }
    }

    #[test]
    fn stage_shapes_follow_downsampling() {
        let cfg = small();
        let b = ModelBundle::init(cfg.clone(), vec![1, 2], 0).unwrap();
        let (stages, z) = encode(&image(&cfg, 2, 1), &b.encoder, &cfg).unwrap();
        assert_eq!(stages[0].dims(), (2, 4, 8, 8));
        assert_eq!(stages[1].dims(), (2, 6, 4, 4));
        assert_eq!(z.dims(), (2, 8, 2, 2));
        let x = decode(&z, &b.decoder, &cfg).unwrap();
        assert_eq!(x.shape(), &[2, 3, 16, 16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = small();
        let b = ModelBundle::init(cfg.clone(), vec![1], 3).unwrap();
        let x = image(&cfg, 2, 9);
        let (e1, s1) = embed_and_score(&b, &x).unwrap();
        let (e2, s2) = embed_and_score(&b, &x).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(s1, s2);
        assert!(s1.iter().all(|s| (0.0..=1.0).contains(&s.value())));
        assert_eq!(e1.shape(), &[2, cfg.embedding_dim()]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_preactivation() {
        let cfg = EncoderConfig { stage_channels: vec![2, 2], image_size: 4, ..Default::default() };
        let b = ModelBundle::init(cfg.clone(), vec![1], 5).unwrap();
        let (stages, _) = encode(&Tensor::zeros(&[1, 3, 4, 4]), &b.encoder, &cfg).unwrap();
        assert!(stages[0].tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_identity_autoencoder() {
        let cfg = EncoderConfig { stage_channels: vec![3, 3], image_size: 4, kernel_size: 1, stride: 1, ..Default::default() };
        let mut b = ModelBundle::init(cfg.clone(), vec![1], 0).unwrap();
        let mut eye = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            eye.data_mut()[c * 3 + c] = 1.0;
        }
        for set in [&mut b.encoder, &mut b.decoder] {
            for (name, t) in set.names.iter().zip(set.tensors.iter_mut()) {
                *t = if name.ends_with(".w") { eye.clone() } else { Tensor::zeros(&[3]) };
            }
        }
        let x = image(&cfg, 2, 4);
        let (_, z) = encode(&x, &b.encoder, &cfg).unwrap();
        assert_eq!(decode(&z, &b.decoder, &cfg).unwrap(), x);
    }

    #[test]
    fn zero_head_scores_one_half() {
        let cfg = small();
        let mut b = ModelBundle::init(cfg.clone(), vec![1], 1).unwrap();
        for t in &mut b.classifier.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, scores) = embed_and_score(&b, &image(&cfg, 3, 2)).unwrap();
        assert!(scores.iter().all(|s| s.value() == 0.5));
    }

    #[test]
    fn classify_needs_three_taps() {
        let cfg = small();
        let b = ModelBundle::init(cfg.clone(), vec![1], 1).unwrap();
        let (stages, _) = encode(&image(&cfg, 1, 2), &b.encoder, &cfg).unwrap();
        assert!(classify(&stages[..2], &b.classifier).is_err());
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        assert!(EncoderConfig { stage_channels: vec![4], ..small() }.validate().is_err());
        assert!(ModelBundle::init(small(), vec![], 0).is_err());
        assert!(ModelBundle::init(small(), vec![3], 0).is_err());
        let cfg = small();
        let b = ModelBundle::init(cfg.clone(), vec![1, 2], 0).unwrap();
        assert!(encode(&Tensor::zeros(&[1, 3, 8, 8]), &b.encoder, &cfg).is_err());
        let z = FeatureMap::new(Tensor::zeros(&[1, 8, 3, 3])).unwrap();
        assert!(decode(&z, &b.decoder, &cfg).is_err());
    }

    #[test]
    fn momentum_landmarks() {
        let cfg = small();
        let b = ModelBundle::init(cfg, vec![1], 0).unwrap();
        let online = ParamSet { names: vec!["p".into()], tensors: vec![Tensor::full(&[2], 1.0)] };
        let mut target = ParamSet { names: vec!["p".into()], tensors: vec![Tensor::zeros(&[2])] };
        momentum_update(&online, &mut target, 1.0).unwrap();
        assert_eq!(target.tensors[0].data(), &[0.0, 0.0]);
        momentum_update(&online, &mut target, 0.999).unwrap();
        assert!((target.tensors[0].data()[0] - 0.001).abs() < 1e-15);
        momentum_update(&online, &mut target, 0.0).unwrap();
        assert_eq!(target, online);
        let mut wrong = b.momentum.clone();
        assert!(momentum_update(&online, &mut wrong, 0.5).is_err());
    }
}
