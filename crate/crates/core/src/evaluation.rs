//! Detection metrics and the intra/cross-domain evaluation protocols.
//!
//! Fakes are the positive class. A sample is predicted fake when its score
//! is at or above the threshold.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CdnError, Result};
use crate::models::{embed_and_score, ModelBundle};
use crate::synthdata::{load_split, DatasetManifest, SPLIT_TEST_CROSS, SPLIT_TEST_INTRA};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: u8,
    pub domain_id: u32,
}

impl ScoredSample {
    pub fn new(score: f64, label: u8, domain_id: u32) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(CdnError::invalid(format!("score {score} outside [0, 1]")));
        }
        if label > 1 {
            return Err(CdnError::invalid(format!("label {label} is not binary")));
        }
        Ok(ScoredSample { score, label, domain_id })
    }
}

fn split_classes(samples: &[ScoredSample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut reals = Vec::new();
    let mut fakes = Vec::new();
    for s in samples {
        if !s.score.is_finite() {
            return Err(CdnError::invalid("non-finite score"));
        }
        if s.label == 0 { reals.push(s.score) } else { fakes.push(s.score) }
    }
    if reals.is_empty() || fakes.is_empty() {
        return Err(CdnError::invalid("metrics need at least one real and one fake sample"));
    }
    reals.sort_by(f64::total_cmp);
    fakes.sort_by(f64::total_cmp);
    Ok((reals, fakes))
}

/// Probability that a random fake outscores a random real, ties counted half.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let (reals, fakes) = split_classes(samples)?;
    let mut credit = 0.0;
    for &f in &fakes {
        let below = reals.partition_point(|&r| r < f);
        let upto = reals.partition_point(|&r| r <= f);
        credit += below as f64 + 0.5 * (upto - below) as f64;
    }
    Ok(credit / (reals.len() * fakes.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// The first point uses an infinite threshold.
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
}

mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() { Repr::Num(*v) } else { Repr::Text(v.to_string()) }.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// ROC curve from `(0, 0)` to `(1, 1)`, one point per distinct score in
/// descending order.
pub fn roc(samples: &[ScoredSample]) -> Result<Vec<RocPoint>> {
    let (reals, fakes) = split_classes(samples)?;
    let (nr, nf) = (reals.len() as f64, fakes.len() as f64);
    let mut thresholds: Vec<f64> = reals.iter().chain(&fakes).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0, threshold: f64::INFINITY }];
    for t in thresholds {
        let fp = reals.len() - reals.partition_point(|&r| r < t);
        let tp = fakes.len() - fakes.partition_point(|&f| f < t);
        points.push(RocPoint { fpr: fp as f64 / nr, tpr: tp as f64 / nf, threshold: t });
    }
    Ok(points)
}

/// Error rate where the false positive and false negative rates meet,
/// interpolated linearly between the bracketing ROC points.
pub fn eer(samples: &[ScoredSample]) -> Result<f64> {
    Ok(eer_from_roc(&roc(samples)?))
}

fn eer_from_roc(points: &[RocPoint]) -> f64 {
    let gap = |p: &RocPoint| p.fpr - (1.0 - p.tpr);
    for k in 1..points.len() {
        let (a, b) = (&points[k - 1], &points[k]);
        let (ga, gb) = (gap(a), gap(b));
        if gb >= 0.0 {
            if gb == 0.0 {
                return b.fpr;
            }
            let t = -ga / (gb - ga);
            return a.fpr + t * (b.fpr - a.fpr);
        }
    }
    1.0
}

/// Smallest false positive rate among thresholds whose true positive rate
/// reaches `target`.
pub fn fpr_at_tpr(samples: &[ScoredSample], target: f64) -> Result<f64> {
    check_target(target)?;
    Ok(fpr_at_tpr_from_roc(&roc(samples)?, target))
}

fn check_target(target: f64) -> Result<()> {
    if target > 0.0 && target <= 1.0 {
        Ok(())
    } else {
        Err(CdnError::invalid(format!("target TPR {target} outside (0, 1]")))
    }
}

fn fpr_at_tpr_from_roc(points: &[RocPoint], target: f64) -> f64 {
    points.iter().filter(|p| p.tpr >= target).map(|p| p.fpr).fold(1.0, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionRates {
    pub acc: f64,
    pub fnr: f64,
    pub fpr: f64,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

pub fn confusion_rates(samples: &[ScoredSample], threshold: f64) -> Result<ConfusionRates> {
    let (reals, fakes) = split_classes(samples)?;
    let fp = reals.iter().filter(|&&r| r >= threshold).count();
    let fnn = fakes.iter().filter(|&&f| f < threshold).count();
    let n = reals.len() + fakes.len();
    Ok(ConfusionRates {
        acc: (n - fp - fnn) as f64 / n as f64,
        fnr: fnn as f64 / fakes.len() as f64,
        fpr: fp as f64 / reals.len() as f64,
    })
}

pub const DEFAULT_TPR_TARGETS: [f64; 2] = [0.85, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub acc: f64,
    pub auc: f64,
    pub eer: f64,
    /// Keyed by the target TPR as written, e.g. `"0.85"`.
    pub fpr_at_tpr: BTreeMap<String, f64>,
    pub fnr: f64,
    pub fpr: f64,
    pub roc: Vec<RocPoint>,
    pub n_real: usize,
    pub n_fake: usize,
}

impl EvalReport {
    pub fn from_samples(split: &str, samples: &[ScoredSample], targets: &[f64]) -> Result<Self> {
        let curve = roc(samples)?;
        let rates = confusion_rates(samples, DEFAULT_THRESHOLD)?;
        let mut at = BTreeMap::new();
        for &t in targets {
            check_target(t)?;
            at.insert(t.to_string(), fpr_at_tpr_from_roc(&curve, t));
        }
        let n_fake = samples.iter().filter(|s| s.label == 1).count();
        Ok(EvalReport {
            split: split.to_string(),
            acc: rates.acc,
            auc: auc(samples)?,
            eer: eer_from_roc(&curve),
            fpr_at_tpr: at,
            fnr: rates.fnr,
            fpr: rates.fpr,
            roc: curve,
            n_real: samples.len() - n_fake,
            n_fake,
        })
    }

    pub fn fpr_at(&self, target: f64) -> Option<f64> {
        self.fpr_at_tpr.get(&target.to_string()).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Held-out identities of the training domains.
    Intra,
    /// The held-out domains.
    Cross,
}

impl Protocol {
    pub fn split(self) -> &'static str {
        match self {
            Protocol::Intra => SPLIT_TEST_INTRA,
            Protocol::Cross => SPLIT_TEST_CROSS,
        }
    }
}

impl FromStr for Protocol {
    type Err = CdnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "intra" => Ok(Protocol::Intra),
            "cross" => Ok(Protocol::Cross),
            other => Err(CdnError::invalid(format!("unknown protocol {other:?}; expected intra or cross"))),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Intra => "intra",
            Protocol::Cross => "cross",
        })
    }
}

const SCORE_BATCH: usize = 32;

/// Per-sample model outputs for one split.
#[derive(Debug, Clone)]
pub struct ScoredSplit {
    pub paths: Vec<String>,
    pub samples: Vec<ScoredSample>,
    pub embeddings: Vec<Vec<f64>>,
}

pub fn score_split(bundle: &ModelBundle, manifest: &DatasetManifest, split: &str) -> Result<ScoredSplit> {
    let data = load_split(manifest, split)?;
    let n = data.labels.len();
    let mut samples = Vec::with_capacity(n);
    let mut embeddings = Vec::with_capacity(n);
    for start in (0..n).step_by(SCORE_BATCH) {
        let idx: Vec<usize> = (start..(start + SCORE_BATCH).min(n)).collect();
        let (emb, scores) = embed_and_score(bundle, &data.images.select(&idx))?;
        let dim = emb.shape()[1];
        for (k, &i) in idx.iter().enumerate() {
            samples.push(ScoredSample::new(scores[k].value(), data.labels[i], data.domains[i])?);
            embeddings.push(emb.data()[k * dim..(k + 1) * dim].to_vec());
        }
    }
    Ok(ScoredSplit { paths: data.paths, samples, embeddings })
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    path: String,
    label: u8,
    domain_id: u32,
    score: f64,
}

/// Files written by [`run_protocol`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolOutputs {
    pub report: PathBuf,
    pub roc: PathBuf,
    pub embeddings: PathBuf,
    pub scores: PathBuf,
}

impl ProtocolOutputs {
    pub fn in_dir(out_dir: &Path, protocol: Protocol) -> Self {
        ProtocolOutputs {
            report: out_dir.join(format!("report_{protocol}.json")),
            roc: out_dir.join(format!("roc_{protocol}.csv")),
            embeddings: out_dir.join(format!("embeddings_{protocol}.csv")),
            scores: out_dir.join(format!("scores_{protocol}.csv")),
        }
    }
}

/// Scores the protocol's test split and writes the report, ROC curve,
/// embeddings and per-sample scores into `out_dir`.
pub fn run_protocol(bundle: &ModelBundle, manifest: &DatasetManifest, protocol: Protocol, out_dir: &Path) -> Result<EvalReport> {
    let split = protocol.split();
    if manifest.split(split).is_empty() {
        return Err(CdnError::MissingSplit(split.to_string()));
    }
    let scored = score_split(bundle, manifest, split)?;
    let report = EvalReport::from_samples(split, &scored.samples, &DEFAULT_TPR_TARGETS)?;
    fs::create_dir_all(out_dir).map_err(|e| CdnError::io(out_dir, e))?;
    let out = ProtocolOutputs::in_dir(out_dir, protocol);

    let json = serde_json::to_string_pretty(&report).map_err(|e| CdnError::Serialization(e.to_string()))?;
    fs::write(&out.report, json).map_err(|e| CdnError::io(&out.report, e))?;

    let mut w = csv::Writer::from_path(&out.roc)?;
    w.write_record(["fpr", "tpr", "threshold"])?;
    for p in &report.roc {
        w.write_record([p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()])?;
    }
    w.flush().map_err(|e| CdnError::io(&out.roc, e))?;

    let mut w = csv::Writer::from_path(&out.embeddings)?;
    let dim = scored.embeddings.first().map_or(0, Vec::len);
    let mut header = vec!["path".to_string(), "label".into(), "domain_id".into()];
    header.extend((0..dim).map(|k| format!("dim{k}")));
    w.write_record(&header)?;
    for ((path, s), e) in scored.paths.iter().zip(&scored.samples).zip(&scored.embeddings) {
        let mut row = vec![path.clone(), s.label.to_string(), s.domain_id.to_string()];
        row.extend(e.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CdnError::io(&out.embeddings, e))?;

    let mut w = csv::Writer::from_path(&out.scores)?;
    for (path, s) in scored.paths.iter().zip(&scored.samples) {
        w.serialize(ScoreRow { path: path.clone(), label: s.label, domain_id: s.domain_id, score: s.score })?;
    }
    w.flush().map_err(|e| CdnError::io(&out.scores, e))?;
    Ok(report)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<ScoreRow>()
        .map(|row| {
            let row = row?;
            ScoredSample::new(row.score, row.label, row.domain_id)
        })
        .collect()
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| CdnError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CdnError::Serialization(format!("{}: {e}", path.display())))
}
