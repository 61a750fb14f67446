//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SMLT" | version u32 | kind u8 | step u64
//! config_len u64 | config JSON bytes
//! n_segments u32
//!   per segment: name_len u32 | name | ndims u32 | dims u64.. | f64 data..
//! SHA-256 of everything above (32 bytes)
//! ```
//!
//! Segment names are `<group>/<layer>` for parameter sets (`pre`, `delta`,
//! `mask<m>`, `router`) plus `lambda` and optimizer moments under `opt.*`.

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::RunConfig;
use crate::diffcore::Tensor;
use crate::experts::ExpertPool;
use crate::l0mask::{HardConcrete, HardConcreteMask};
use crate::metaopt::TrainState;
use crate::optim::Adam;
use crate::params::ParamSet;

pub const MAGIC: &[u8; 4] = b"SMLT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("checkpoint version {0} is not supported (expected {VERSION})")]
    Version(u32),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint contents: {0}")]
    Schema(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn schema(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Schema(msg.into())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Pretrained = 0,
    Smat = 1,
    /// Dense meta-tuned modulation without masks or router.
    Dense = 2,
    /// One mask fitted on a fixed modulation.
    DomainMask = 3,
}

impl Kind {
    fn from_byte(b: u8) -> Option<Self> {
        [Kind::Pretrained, Kind::Smat, Kind::Dense, Kind::DomainMask]
            .into_iter()
            .find(|k| *k as u8 == b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: Kind,
    pub step: u64,
    /// Exact bytes of the config echo; kept verbatim for lossless round trips.
    pub config_json: String,
    pub segments: Vec<Segment>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Truncated)
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for s in &self.segments {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Checks magic, then version, then checksum, then structure.
    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if bytes.len() < 8 + 32 {
            return Err(CheckpointError::Truncated);
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Checksum);
        }
        let mut r = Reader { buf: body, pos: 8 };
        let kind_byte = r.take(1)?[0];
        let kind = Kind::from_byte(kind_byte).ok_or_else(|| schema(format!("unknown kind {kind_byte}")))?;
        let step = r.u64()?;
        let n = r.len()?;
        let config_json = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| schema("config is not utf-8"))?;
        let n_seg = r.u32()?;
        let mut segments = Vec::new();
        for _ in 0..n_seg {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| schema("segment name is not utf-8"))?;
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or(CheckpointError::Truncated)?;
            let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            segments.push(Segment { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(schema("trailing bytes after segments"));
        }
        Ok(Self {
            kind,
            step,
            config_json,
            segments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    pub fn config(&self) -> Result<RunConfig, CheckpointError> {
        let cfg: RunConfig =
            serde_json::from_str(&self.config_json).map_err(|e| schema(format!("config echo: {e}")))?;
        cfg.validate().map_err(|e| schema(e.to_string()))?;
        Ok(cfg)
    }

    pub fn segment(&self, name: &str) -> Result<&Segment, CheckpointError> {
        self.segments
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| schema(format!("missing segment {name}")))
    }

    fn new(kind: Kind, step: u64, cfg: &RunConfig) -> Self {
        Self {
            kind,
            step,
            config_json: serde_json::to_string(cfg).expect("config serializes"),
            segments: Vec::new(),
        }
    }

    fn push_set(&mut self, group: &str, set: &ParamSet) {
        for (spec, t) in set.iter() {
            self.segments.push(Segment {
                name: format!("{group}/{}", spec.name),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
    }

    fn push_vec(&mut self, name: String, data: Vec<f64>) {
        self.segments.push(Segment {
            name,
            shape: vec![data.len()],
            data,
        });
    }

    fn push_adam(&mut self, group: &str, opt: &Adam) {
        self.push_vec(
            format!("opt.{group}.hyper"),
            vec![opt.lr, opt.beta1, opt.beta2, opt.eps, opt.t as f64],
        );
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            self.push_vec(format!("opt.{group}.m.{i}"), m.clone());
            self.push_vec(format!("opt.{group}.v.{i}"), v.clone());
        }
    }

    /// Reads a parameter group shaped like `like`; shapes must match exactly.
    fn read_set(&self, group: &str, like: &ParamSet) -> Result<ParamSet, CheckpointError> {
        let values = like
            .iter()
            .map(|(spec, t)| {
                let name = format!("{group}/{}", spec.name);
                let s = self.segment(&name)?;
                if s.shape != t.shape() {
                    return Err(schema(format!("{name}: shape {:?}, architecture expects {:?}", s.shape, t.shape())));
                }
                Ok(Tensor::new(s.shape.clone(), s.data.clone()).expect("shape checked"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(like.with_values(values).expect("same specs"))
    }

    fn read_vec(&self, name: &str, len: usize) -> Result<Vec<f64>, CheckpointError> {
        let s = self.segment(name)?;
        if s.shape != [len] {
            return Err(schema(format!("{name}: shape {:?}, expected [{len}]", s.shape)));
        }
        Ok(s.data.clone())
    }

    fn read_adam(&self, group: &str, like: &Adam) -> Result<Adam, CheckpointError> {
        let h = self.read_vec(&format!("opt.{group}.hyper"), 5)?;
        let mut opt = like.clone();
        (opt.lr, opt.beta1, opt.beta2, opt.eps, opt.t) = (h[0], h[1], h[2], h[3], h[4] as u64);
        for i in 0..like.m.len() {
            opt.m[i] = self.read_vec(&format!("opt.{group}.m.{i}"), like.m[i].len())?;
            opt.v[i] = self.read_vec(&format!("opt.{group}.v.{i}"), like.v[i].len())?;
        }
        Ok(opt)
    }

    fn expect_kind(&self, kinds: &[Kind]) -> Result<(), CheckpointError> {
        if kinds.contains(&self.kind) {
            Ok(())
        } else {
            Err(schema(format!("checkpoint holds {:?}, expected one of {kinds:?}", self.kind)))
        }
    }

    pub fn pretrained(cfg: &RunConfig, theta_pre: &ParamSet) -> Self {
        let mut c = Self::new(Kind::Pretrained, 0, cfg);
        c.push_set("pre", theta_pre);
        c
    }

    pub fn smat(cfg: &RunConfig, state: &TrainState) -> Self {
        let mut c = Self::new(Kind::Smat, state.step, cfg);
        c.push_set("pre", &state.pool.theta_pre);
        c.push_set("delta", &state.pool.theta_delta);
        for (m, mask) in state.pool.masks.iter().enumerate() {
            c.push_set(&format!("mask{m}"), &mask.log_alpha);
        }
        c.push_vec("lambda".into(), state.pool.lambdas.clone());
        c.push_set("router", &state.router.params);
        c.push_adam("delta", &state.opt_delta);
        c.push_adam("router", &state.opt_router);
        c.push_adam("masks", &state.opt_masks);
        c
    }

    pub fn dense(cfg: &RunConfig, theta_pre: &ParamSet, delta: &ParamSet, step: u64) -> Self {
        let mut c = Self::new(Kind::Dense, step, cfg);
        c.push_set("pre", theta_pre);
        c.push_set("delta", delta);
        c
    }

    pub fn domain_mask(cfg: &RunConfig, theta_pre: &ParamSet, delta: &ParamSet, mask: &HardConcreteMask) -> Self {
        let mut c = Self::new(Kind::DomainMask, 0, cfg);
        c.push_set("pre", theta_pre);
        c.push_set("delta", delta);
        c.push_set("mask0", &mask.log_alpha);
        c
    }

    /// Pre-trained parameters from any kind.
    pub fn theta_pre(&self) -> Result<ParamSet, CheckpointError> {
        let cfg = self.config()?;
        self.read_set("pre", &ParamSet::zeros(cfg.backbone.specs()))
    }

    /// `(theta_pre, delta)` from a dense, mask or SMAT checkpoint.
    pub fn modulation(&self) -> Result<(ParamSet, ParamSet), CheckpointError> {
        self.expect_kind(&[Kind::Dense, Kind::DomainMask, Kind::Smat])?;
        let pre = self.theta_pre()?;
        let delta = self.read_set("delta", &pre)?;
        Ok((pre, delta))
    }

    pub fn domain_mask_fit(&self) -> Result<HardConcreteMask, CheckpointError> {
        self.expect_kind(&[Kind::DomainMask])?;
        let pre = self.theta_pre()?;
        let la = self.read_set("mask0", &pre)?;
        HardConcreteMask::new(la, HardConcrete::default()).map_err(|e| schema(e.to_string()))
    }

    /// Rebuilds a training state. Pretrained checkpoints give a fresh state on
    /// their `theta_pre`; dense ones a single always-on expert over their modulation.
    pub fn train_state(&self) -> Result<TrainState, CheckpointError> {
        let cfg = self.config()?;
        let pre = self.theta_pre()?;
        let bad = |e: crate::metaopt::MetaOptError| schema(e.to_string());
        match self.kind {
            Kind::Pretrained => TrainState::init(&cfg.train, cfg.backbone, pre).map_err(bad),
            Kind::Dense | Kind::DomainMask => {
                let mut tc = cfg.train.clone();
                tc.n_experts = 1;
                let mut state = TrainState::init(&tc, cfg.backbone, pre.clone()).map_err(bad)?;
                let delta = self.read_set("delta", &pre)?;
                let mask = if self.kind == Kind::Dense {
                    // stretched sigmoid saturates, so the deterministic gate is exactly 1
                    HardConcreteMask::constant(pre.specs().clone(), 1e3, tc.hc)
                } else {
                    HardConcreteMask::new(self.read_set("mask0", &pre)?, tc.hc)
                }
                .map_err(|e| schema(e.to_string()))?;
                state.pool = ExpertPool::new(pre, delta, vec![mask], vec![0.0], tc.tau).map_err(|e| schema(e.to_string()))?;
                state.step = self.step;
                Ok(state)
            }
            Kind::Smat => {
                let mut state = TrainState::init(&cfg.train, cfg.backbone, pre.clone()).map_err(bad)?;
                let delta = self.read_set("delta", &pre)?;
                let masks = (0..cfg.train.n_experts)
                    .map(|m| {
                        let la = self.read_set(&format!("mask{m}"), &pre)?;
                        HardConcreteMask::new(la, cfg.train.hc).map_err(|e| schema(e.to_string()))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                if self.segments.iter().any(|s| s.name.starts_with(&format!("mask{}/", cfg.train.n_experts))) {
                    return Err(schema("more masks than the configured n_experts"));
                }
                let lambdas = self.read_vec("lambda", cfg.train.n_experts)?;
                state.pool =
                    ExpertPool::new(pre, delta, masks, lambdas, cfg.train.tau).map_err(|e| schema(e.to_string()))?;
                let router = self.read_set("router", &state.router.params)?;
                state.router = state.router.with_params(router);
                state.opt_delta = self.read_adam("delta", &state.opt_delta)?;
                state.opt_router = self.read_adam("router", &state.opt_router)?;
                state.opt_masks = self.read_adam("masks", &state.opt_masks)?;
                state.step = self.step;
                Ok(state)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            kind: Kind::Smat,
            step: 7,
            config_json: "{\"a\":1}".into(),
            segments: vec![
                Segment {
                    name: "x/w".into(),
                    shape: vec![2, 2],
                    data: vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300],
                },
                Segment {
                    name: "s".into(),
                    shape: vec![],
                    data: vec![0.1],
                },
            ],
        }
    }

    #[test]
    fn encode_decode_is_lossless() {
        let c = sample();
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.segments[0].data[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, c);
    }

    #[test]
    fn layout_prefix() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"SMLT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(bytes[8], Kind::Smat as u8);
        assert_eq!(u64::from_le_bytes(bytes[9..17].try_into().unwrap()), 7);
    }

    #[test]
    fn distinct_errors() {
        let bytes = sample().encode();
        let mut flipped = bytes.clone();
        flipped[30] ^= 1;
        assert!(matches!(Checkpoint::decode(&flipped), Err(CheckpointError::Checksum)));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::decode(&v2), Err(CheckpointError::Version(2))));
        assert!(matches!(Checkpoint::decode(b"NOPE1234"), Err(CheckpointError::Magic)));
        assert!(matches!(Checkpoint::decode(&bytes[..6]), Err(CheckpointError::Magic)));
        let mut tail = bytes.clone();
        tail.truncate(bytes.len() - 1);
        assert!(matches!(Checkpoint::decode(&tail), Err(CheckpointError::Checksum)));
    }

    #[test]
    fn short_body_with_valid_digest_is_truncated() {
        let mut body = b"SMLT".to_vec();
        body.extend_from_slice(&VERSION.to_le_bytes());
        body.push(1);
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest);
        assert!(matches!(Checkpoint::decode(&body), Err(CheckpointError::Truncated)));
    }
}
