//! The desensitization training loop.
//!
//! Each step draws a domain-stratified batch of reals and fakes, mixes the
//! latent statistics of a fraction of the reals across domains at the tapped
//! encoder stages, decodes, and optimizes
//! `cls + λd·Ld + λi·Li + λs·Ls (+ λb·Lb)` with Adam. The momentum encoder
//! follows the online encoder by EMA after every step and only ever serves
//! as a loss target.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{CdnError, Result};
use crate::feature_stats::{plan_pairing, Pairing, DEFAULT_EPS};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossBreakdown, LossWeights, SCORE_CLAMP};
use crate::models::{classifier_taps, classify_graph, decode_graph, encode_graph, momentum_update, EncoderConfig, MixPlan, ModelBundle, ParamSet};
use crate::synthdata::{load_split, DatasetManifest, LoadedSplit, SPLIT_TRAIN};
use crate::tensor::Tensor;

/// What the classifier sees during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// Reals through the mixed forward pass, fakes unmixed.
    Mixed,
    /// Reals and fakes through an unmixed pass.
    Clean,
    /// Reals and fakes each mixed within their own class.
    MixedAll,
}

/// Which encoder re-encodes reconstructions and the style reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetEncoder {
    Momentum,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum_m: f64,
    /// Fraction of reals re-styled per step.
    pub alpha: f64,
    pub layer_taps: Vec<usize>,
    pub weights: LossWeights,
    pub steps: u64,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_target")]
    pub target_encoder: TargetEncoder,
    #[serde(default = "default_classifier_input")]
    pub classifier_input: ClassifierInput,
    #[serde(default)]
    pub model: EncoderConfig,
}

fn default_classifier_input() -> ClassifierInput {
    ClassifierInput::Clean
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}
fn default_target() -> TargetEncoder {
    TargetEncoder::Momentum
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lr: 2e-4,
            weight_decay: 1e-5,
            momentum_m: 0.999,
            alpha: 0.3,
            layer_taps: vec![1, 2],
            weights: LossWeights::default(),
            steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            eps: DEFAULT_EPS,
            target_encoder: TargetEncoder::Momentum,
            classifier_input: default_classifier_input(),
            model: EncoderConfig::default(),
        }
    }
}

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(CdnError::InvalidConfig("batch_size must be >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CdnError::InvalidConfig("lr must be > 0 and weight_decay >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum_m) || !(0.0..=1.0).contains(&self.alpha) {
            return Err(CdnError::InvalidConfig("momentum_m and alpha must lie in [0, 1]".into()));
        }
        if !(self.eps > 0.0) {
            return Err(CdnError::InvalidConfig("eps must be > 0".into()));
        }
        self.weights.validate()?;
        self.model.validate()?;
        if self.layer_taps.is_empty() || self.layer_taps.iter().any(|&t| t == 0 || t > 2) {
            return Err(CdnError::InvalidConfig(format!("layer_taps {:?} must be a nonempty subset of {{1, 2}}", self.layer_taps)));
        }
        Ok(())
    }

    /// Step learning rate: halved every 40% of the run.
    pub fn lr_at(&self, step: u64) -> f64 {
        let period = ((self.steps as f64 * 0.4).ceil() as u64).max(1);
        self.lr * 0.5f64.powi((step / period) as i32)
    }
}

/// First and second moment estimates for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamMoments {
    fn zeros_like(p: &ParamSet) -> Self {
        AdamMoments {
            m: p.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: p.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub bundle: ModelBundle,
    pub opt_encoder: AdamMoments,
    pub opt_decoder: AdamMoments,
    pub opt_classifier: AdamMoments,
    /// Steps completed.
    pub step: u64,
    pub config: TrainConfig,
    pub history: Vec<LossBreakdown>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::init(config.model.clone(), config.layer_taps.clone(), config.seed)?;
        Ok(TrainState {
            opt_encoder: AdamMoments::zeros_like(&bundle.encoder),
            opt_decoder: AdamMoments::zeros_like(&bundle.decoder),
            opt_classifier: AdamMoments::zeros_like(&bundle.classifier),
            bundle,
            step: 0,
            config,
            history: Vec::new(),
        })
    }
}

/// One step's images: domain-stratified reals, and fakes for the classifier
/// and the boundary term.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBatch {
    pub real: Tensor,
    pub real_domains: Vec<u32>,
    pub fake: Tensor,
    pub fake_domains: Vec<u32>,
    pub real_index: Vec<usize>,
    pub fake_index: Vec<usize>,
}

/// Training images grouped by label and domain.
#[derive(Debug, Clone)]
pub struct TrainPool {
    pub images: Tensor,
    pub domains: Vec<u32>,
    reals: BTreeMap<u32, Vec<usize>>,
    fakes: BTreeMap<u32, Vec<usize>>,
}

impl TrainPool {
    pub fn new(split: LoadedSplit) -> Result<Self> {
        let mut reals: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        let mut fakes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, (&l, &d)) in split.labels.iter().zip(&split.domains).enumerate() {
            let group = if l == 0 { &mut reals } else { &mut fakes };
            group.entry(d).or_default().push(i);
        }
        if reals.is_empty() || fakes.is_empty() {
            return Err(CdnError::invalid("training split needs both real and fake images"));
        }
        Ok(TrainPool { images: split.images, domains: split.domains, reals, fakes })
    }

    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        TrainPool::new(load_split(manifest, SPLIT_TRAIN)?)
    }

    pub fn real_domains(&self) -> usize {
        self.reals.len()
    }
}

/// Per-step generator, a pure function of `(seed, step)`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut z = seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn stratified(groups: &BTreeMap<u32, Vec<usize>>, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = groups.len();
    let mut out = Vec::with_capacity(n);
    for (g, idx) in groups.values().enumerate() {
        let take = n / k + usize::from(g < n % k);
        let mut shuffled = idx.clone();
        shuffled.shuffle(rng);
        if take <= shuffled.len() {
            out.extend_from_slice(&shuffled[..take]);
        } else {
            out.extend_from_slice(&shuffled);
            out.extend((shuffled.len()..take).map(|_| idx[rng.random_range(0..idx.len())]));
        }
    }
    out
}

/// Draws `batch_size` reals and `batch_size` fakes, each split evenly over
/// the available domains.
pub fn sample_batch(pool: &TrainPool, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<SampledBatch> {
    if cfg.alpha > 0.0 && pool.real_domains() < 2 {
        return Err(CdnError::DegenerateBatch("domain mixing needs at least two training domains".into()));
    }
    let real_index = stratified(&pool.reals, cfg.batch_size, rng);
    let fake_index = stratified(&pool.fakes, cfg.batch_size, rng);
    Ok(SampledBatch {
        real: pool.images.select(&real_index),
        real_domains: real_index.iter().map(|&i| pool.domains[i]).collect(),
        fake: pool.images.select(&fake_index),
        fake_domains: fake_index.iter().map(|&i| pool.domains[i]).collect(),
        real_index,
        fake_index,
    })
}

fn adam_update(params: &mut ParamSet, grads: &[Option<Tensor>], opt: &mut AdamMoments, lr: f64, wd: f64, t: u64) {
    let (b1, b2) = ADAM_BETAS;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (k, p) in params.tensors.iter_mut().enumerate() {
        let g = grads[k].as_ref();
        let (m, v) = (&mut opt.m[k], &mut opt.v[k]);
        for j in 0..p.len() {
            let pv = p.data()[j];
            let gj = g.map_or(0.0, |g| g.data()[j]) + wd * pv;
            let mj = b1 * m.data()[j] + (1.0 - b1) * gj;
            let vj = b2 * v.data()[j] + (1.0 - b2) * gj * gj;
            m.data_mut()[j] = mj;
            v.data_mut()[j] = vj;
            p.data_mut()[j] = pv - lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS);
        }
    }
}

/// Graph nodes of one forward pass, exposed for tests.
pub struct StepGraph {
    pub graph: Graph,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub classifier: Vec<Var>,
    pub pairing: Pairing,
}

/// Builds the full training objective for one batch without touching the
/// parameters.
pub fn build_step_graph(bundle: &ModelBundle, batch: &SampledBatch, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<StepGraph> {
    let mcfg = &bundle.config;
    let w = &cfg.weights;
    let mut g = Graph::new();
    let enc_p = bundle.encoder.to_graph(&mut g, true);
    let dec_p = bundle.decoder.to_graph(&mut g, true);
    let head_p = bundle.classifier.to_graph(&mut g, true);
    let mom_p = bundle.momentum.to_graph(&mut g, false);
    let target_p = match cfg.target_encoder {
        TargetEncoder::Momentum => mom_p.clone(),
        TargetEncoder::Online => enc_p.clone(),
    };

    let pairing = plan_pairing(&batch.real_domains, cfg.alpha, rng)?;
    let xr = g.constant(batch.real.clone());
    let plan = MixPlan { pairing: &pairing, taps: &bundle.layer_taps, eps: cfg.eps };
    let enc_r = encode_graph(&mut g, xr, &enc_p, mcfg, Some(plan))?;
    let z_out = enc_r.latent;
    let desens = w.desensitization_enabled();
    let dec_r = decode_graph(&mut g, z_out, &dec_p, mcfg, desens || mcfg.stages() == 2)?;
    let (emb_r, score_r) = if cfg.classifier_input == ClassifierInput::Clean && !pairing.is_empty() {
        let enc_c = encode_graph(&mut g, xr, &enc_p, mcfg, None)?;
        let dec_c = decode_graph(&mut g, enc_c.latent, &dec_p, mcfg, mcfg.stages() == 2)?;
        classify_graph(&mut g, &classifier_taps(&enc_c, &dec_c)?, &head_p)?
    } else {
        classify_graph(&mut g, &classifier_taps(&enc_r, &dec_r)?, &head_p)?
    };

    let xf = g.constant(batch.fake.clone());
    let fake_pairing = match cfg.classifier_input {
        ClassifierInput::MixedAll if cfg.alpha > 0.0 => Some(plan_pairing(&batch.fake_domains, cfg.alpha, rng)?),
        _ => None,
    };
    let fake_plan = fake_pairing.as_ref().map(|p| MixPlan { pairing: p, taps: &bundle.layer_taps, eps: cfg.eps });
    let enc_f = encode_graph(&mut g, xf, &enc_p, mcfg, fake_plan)?;
    let dec_f = decode_graph(&mut g, enc_f.latent, &dec_p, mcfg, mcfg.stages() == 2)?;
    let (emb_f, score_f) = classify_graph(&mut g, &classifier_taps(&enc_f, &dec_f)?, &head_p)?;

    let scores = g.concat(&[score_r, score_f], 0)?;
    let labels: Vec<f64> = std::iter::repeat_n(0.0, batch.real_domains.len())
        .chain(std::iter::repeat_n(1.0, batch.fake_domains.len()))
        .collect();
    let cls = g.bce(scores, &labels, SCORE_CLAMP)?;
    let mut terms = vec![(cls, 1.0)];
    let (mut d, mut i, mut s, mut b) = (0.0, 0.0, 0.0, 0.0);

    if desens {
        let recon = dec_r.output;
        let ld = losses::denoising_reconstruction_loss(&mut g, recon, xr)?;
        let re = encode_graph(&mut g, recon, &target_p, mcfg, None)?;
        let li = losses::intrinsic_loss(&mut g, re.latent, z_out)?;
        let partner = pairing.partner_of(batch.real_domains.len());
        let xb = g.constant(batch.real.select(&partner));
        let reference = encode_graph(&mut g, xb, &mom_p, mcfg, None)?;
        let taps: Vec<usize> = bundle.layer_taps.iter().map(|t| t - 1).collect();
        let ref_taps: Vec<Var> = taps.iter().map(|&t| reference.stages[t]).collect();
        let rec_taps: Vec<Var> = taps.iter().map(|&t| re.stages[t]).collect();
        let ls = losses::domain_alignment_loss(&mut g, &ref_taps, &rec_taps, cfg.eps)?;
        d = g.value(ld).item();
        i = g.value(li).item();
        s = g.value(ls).item();
        terms.extend([(ld, w.lambda_d), (li, w.lambda_i), (ls, w.lambda_s)]);
    }
    if w.boundary_enabled() {
        let lb = g.boundary(emb_r, emb_f)?;
        b = g.value(lb).item();
        terms.push((lb, w.lambda_b));
    }
    let breakdown = losses::total_loss(g.value(cls).item(), d, i, s, b, w)?;
    let total = g.weighted_sum(&terms)?;
    Ok(StepGraph { graph: g, total, breakdown, encoder: enc_p, decoder: dec_p, classifier: head_p, pairing })
}

/// One optimization step on `batch`. Consumes the generator state that
/// follows batch sampling for the mixing plan.
pub fn train_step(state: &mut TrainState, batch: &SampledBatch, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
    let step = state.step;
    let cfg = state.config.clone();
    let diverged = |detail: String| CdnError::TrainingDivergence { step, detail };
    let mut sg = build_step_graph(&state.bundle, batch, &cfg, rng).map_err(|e| match e {
        CdnError::TrainingDivergence { detail, .. } => diverged(detail),
        other => other,
    })?;
    if !sg.breakdown.total.is_finite() || !sg.graph.value(sg.total).item().is_finite() {
        return Err(diverged(format!("total loss {}", sg.breakdown.total)));
    }
    sg.graph.backward(sg.total)?;
    let grads = |vars: &[Var]| -> Vec<Option<Tensor>> { vars.iter().map(|&v| sg.graph.grad(v).cloned()).collect() };
    let (ge, gd, gc) = (grads(&sg.encoder), grads(&sg.decoder), grads(&sg.classifier));
    if ge.iter().chain(&gd).chain(&gc).flatten().any(|t| !t.is_finite()) {
        return Err(diverged("non-finite gradient".into()));
    }

    let lr = cfg.lr_at(step);
    let t = step + 1;
    adam_update(&mut state.bundle.encoder, &ge, &mut state.opt_encoder, lr, cfg.weight_decay, t);
    adam_update(&mut state.bundle.decoder, &gd, &mut state.opt_decoder, lr, cfg.weight_decay, t);
    adam_update(&mut state.bundle.classifier, &gc, &mut state.opt_classifier, lr, cfg.weight_decay, t);
    let bundle = &mut state.bundle;
    momentum_update(&bundle.encoder, &mut bundle.momentum, cfg.momentum_m)?;
    if !bundle.encoder.is_finite() || !bundle.decoder.is_finite() || !bundle.classifier.is_finite() {
        return Err(diverged("non-finite parameters after update".into()));
    }
    state.step += 1;
    state.history.push(sg.breakdown);
    Ok(sg.breakdown)
}

/// Samples and runs the next step of `state`.
pub fn advance(state: &mut TrainState, pool: &TrainPool) -> Result<LossBreakdown> {
    let mut rng = step_rng(state.config.seed, state.step);
    let batch = sample_batch(pool, &state.config, &mut rng)?;
    train_step(state, &batch, &mut rng)
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "loss_history.csv";

/// Runs `state` up to `state.config.steps`, checkpointing into `out_dir`.
/// Always writes a final checkpoint and the loss history, even for zero
/// steps.
pub fn train_from(mut state: TrainState, pool: &TrainPool, out_dir: &Path) -> Result<TrainState> {
    fs::create_dir_all(out_dir).map_err(|e| CdnError::io(out_dir, e))?;
    let every = state.config.checkpoint_every;
    while state.step < state.config.steps {
        advance(&mut state, pool)?;
        if every > 0 && state.step % every == 0 && state.step < state.config.steps {
            checkpoint::save(&state, &out_dir.join(CHECKPOINT_FILE))?;
        }
    }
    checkpoint::save(&state, &out_dir.join(CHECKPOINT_FILE))?;
    write_history(&state.history, &out_dir.join(HISTORY_FILE))?;
    Ok(state)
}

pub fn train(manifest: &DatasetManifest, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainState> {
    let pool = TrainPool::from_manifest(manifest)?;
    train_from(TrainState::new(cfg.clone())?, &pool, out_dir)
}

#[derive(Debug, Serialize, Deserialize)]
struct HistoryRow {
    step: u64,
    cls: f64,
    d: f64,
    i: f64,
    s: f64,
    b: f64,
    total: f64,
}

pub fn write_history(history: &[LossBreakdown], path: &Path) -> Result<PathBuf> {
    let mut w = csv::Writer::from_path(path)?;
    for (k, l) in history.iter().enumerate() {
        w.serialize(HistoryRow { step: k as u64 + 1, cls: l.cls, d: l.d, i: l.i, s: l.s, b: l.b, total: l.total })?;
    }
    w.flush().map_err(|e| CdnError::io(path, e))?;
    Ok(path.to_path_buf())
}

pub fn read_history(path: &Path) -> Result<Vec<LossBreakdown>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<HistoryRow>()
        .map(|row| row.map(|h| LossBreakdown { cls: h.cls, d: h.d, i: h.i, s: h.s, b: h.b, total: h.total }).map_err(CdnError::from))
        .collect()
}

/// Named ablation arms, each switching one component off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// No domain transformation: `alpha = 0`.
    Dt,
    /// No desensitization losses: `λd = λi = λs = 0`.
    Dl,
    /// No boundary constraint: `λb = 0`.
    Dbc,
    /// Transform at the second stage only.
    Layer1,
    /// Transform at the first stage only.
    Layer2,
}

impl Ablation {
    pub fn apply(self, cfg: &mut TrainConfig) {
        match self {
            Ablation::Dt => cfg.alpha = 0.0,
            Ablation::Dl => {
                cfg.weights.lambda_d = 0.0;
                cfg.weights.lambda_i = 0.0;
                cfg.weights.lambda_s = 0.0;
            }
            Ablation::Dbc => cfg.weights.lambda_b = 0.0,
            Ablation::Layer1 => cfg.layer_taps = vec![2],
            Ablation::Layer2 => cfg.layer_taps = vec![1],
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = CdnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dt" => Ok(Ablation::Dt),
            "dl" => Ok(Ablation::Dl),
            "dbc" => Ok(Ablation::Dbc),
            "layer1" => Ok(Ablation::Layer1),
            "layer2" => Ok(Ablation::Layer2),
            _ => Err(CdnError::invalid(format!("unknown ablation {s:?}; expected dt, dl, dbc, layer1 or layer2"))),
        }
    }
}
