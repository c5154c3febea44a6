//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian `u32` version, little-endian `u64`
//! header length, a JSON header describing every tensor, then all tensor
//! values as little-endian `f64` in header order followed by the loss
//! history (six values per step). Values round-trip bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CdnError, Result};
use crate::losses::LossBreakdown;
use crate::models::{ModelBundle, ParamSet};
use crate::tensor::Tensor;
use crate::training::{AdamMoments, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"CDNCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct GroupHeader {
    group: String,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    groups: Vec<GroupHeader>,
    history_len: usize,
}

const GROUPS: [&str; 10] = [
    "encoder",
    "decoder",
    "momentum",
    "classifier",
    "adam_m.encoder",
    "adam_v.encoder",
    "adam_m.decoder",
    "adam_v.decoder",
    "adam_m.classifier",
    "adam_v.classifier",
];

fn groups(state: &TrainState) -> [(&[String], &[Tensor]); 10] {
    let b = &state.bundle;
    [
        (&b.encoder.names, &b.encoder.tensors),
        (&b.decoder.names, &b.decoder.tensors),
        (&b.momentum.names, &b.momentum.tensors),
        (&b.classifier.names, &b.classifier.tensors),
        (&b.encoder.names, &state.opt_encoder.m),
        (&b.encoder.names, &state.opt_encoder.v),
        (&b.decoder.names, &state.opt_decoder.m),
        (&b.decoder.names, &state.opt_decoder.v),
        (&b.classifier.names, &state.opt_classifier.m),
        (&b.classifier.names, &state.opt_classifier.v),
    ]
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let gs = groups(state);
    let header = Header {
        config: state.config.clone(),
        step: state.step,
        groups: GROUPS
            .iter()
            .zip(&gs)
            .map(|(g, (names, ts))| GroupHeader {
                group: g.to_string(),
                names: names.to_vec(),
                shapes: ts.iter().map(|t| t.shape().to_vec()).collect(),
            })
            .collect(),
        history_len: state.history.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CdnError::Serialization(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, ts) in &gs {
        for t in ts.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for l in &state.history {
        for v in [l.cls, l.d, l.i, l.s, l.b, l.total] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| CdnError::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CdnError::Checkpoint("tensor too large".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<TrainState> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(CdnError::Checkpoint("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(c.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CdnError::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(c.take(8)?.try_into().unwrap());
    let hlen = usize::try_from(hlen).map_err(|_| CdnError::Checkpoint("header too large".into()))?;
    let header: Header = serde_json::from_slice(c.take(hlen)?).map_err(|e| CdnError::Checkpoint(format!("bad header: {e}")))?;
    if header.groups.len() != GROUPS.len() || header.groups.iter().zip(GROUPS).any(|(h, g)| h.group != g) {
        return Err(CdnError::Checkpoint("unexpected tensor groups".into()));
    }
    let mut sets = Vec::with_capacity(GROUPS.len());
    for gh in &header.groups {
        if gh.names.len() != gh.shapes.len() {
            return Err(CdnError::Checkpoint(format!("group {} names and shapes differ in length", gh.group)));
        }
        let mut tensors = Vec::with_capacity(gh.shapes.len());
        for shape in &gh.shapes {
            let n = shape.iter().product();
            tensors.push(Tensor::new(shape.clone(), c.f64s(n)?)?);
        }
        sets.push(ParamSet { names: gh.names.clone(), tensors });
    }
    let hist = c.f64s(header.history_len * 6)?;
    if c.pos != buf.len() {
        return Err(CdnError::Checkpoint("trailing bytes after checkpoint payload".into()));
    }
    let history = hist
        .chunks_exact(6)
        .map(|v| LossBreakdown { cls: v[0], d: v[1], i: v[2], s: v[3], b: v[4], total: v[5] })
        .collect();

    let mut it = sets.into_iter();
    let mut next = || it.next().unwrap();
    let (encoder, decoder, momentum, classifier) = (next(), next(), next(), next());
    let mut moments = || AdamMoments { m: next().tensors, v: next().tensors };
    let (opt_encoder, opt_decoder, opt_classifier) = (moments(), moments(), moments());
    let bundle = ModelBundle {
        config: header.config.model.clone(),
        encoder,
        decoder,
        momentum,
        classifier,
        layer_taps: header.config.layer_taps.clone(),
    };
    bundle.validate().map_err(|e| CdnError::Checkpoint(format!("inconsistent model: {e}")))?;
    for (p, o) in [(&bundle.encoder, &opt_encoder), (&bundle.decoder, &opt_decoder), (&bundle.classifier, &opt_classifier)] {
        let same = |ts: &[Tensor]| ts.len() == p.tensors.len() && ts.iter().zip(&p.tensors).all(|(a, b)| a.shape() == b.shape());
        if !same(&o.m) || !same(&o.v) {
            return Err(CdnError::Checkpoint("optimizer state does not match parameters".into()));
        }
    }
    Ok(TrainState { bundle, opt_encoder, opt_decoder, opt_classifier, step: header.step, config: header.config, history })
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CdnError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CdnError::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainState> {
    from_bytes(&fs::read(path).map_err(|e| CdnError::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::EncoderConfig;

    fn small_state() -> TrainState {
        let cfg = TrainConfig {
            model: EncoderConfig { stage_channels: vec![2, 3], image_size: 8, ..EncoderConfig::default() },
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(cfg).unwrap();
        s.opt_encoder.m[0].data_mut()[0] = 0.1 + 0.2;
        s.opt_decoder.v[1].data_mut()[0] = f64::MIN_POSITIVE / 3.0;
        s.step = 7;
        s.history.push(LossBreakdown { cls: 0.7, d: 0.1, i: 0.2, s: 0.3, b: 0.0, total: 0.76 });
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = small_state();
        let back = from_bytes(&to_bytes(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.opt_decoder.v[1].data()[0].to_bits(), s.opt_decoder.v[1].data()[0].to_bits());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = to_bytes(&small_state()).unwrap();
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(CdnError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CdnError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(from_bytes(&bad), Err(CdnError::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(from_bytes(&long), Err(CdnError::Checkpoint(_))));
    }
}
