//! Binary checkpoint and classifier files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "HYPCLIP\0"
//! version  u32
//! flags    u32      bit 0: inference-only artifact
//! mode     u32 length + UTF-8
//! step     u64
//! config   u32 length + UTF-8 `key = value` lines
//! count    u32
//! tensors  count × { name (u32 length + UTF-8), dtype u8 (0 = f32),
//!                    rank u32, dims u64 × rank, payload f32 × numel,
//!                    crc32 u32 of the payload bytes }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::image_encoder::{param_layout, DeployedClassifier, ImageEncoder, NormParamSet, RunningStats};
use crate::model::{Model, ModelMode};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 8] = b"HYPCLIP\0";
pub const VERSION: u32 = 1;
pub const FLAG_INFERENCE_ONLY: u32 = 1;
pub const CLASSIFIER_TAG: &str = "classifier";

const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: String,
    pub step: u64,
    pub inference_only: bool,
    pub config: String,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.buf.len(),
                what: format!("{what} ({n} bytes at offset {})", self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let at = self.pos;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{what} at offset {at} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.inference_only { FLAG_INFERENCE_ONLY } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        put_str(&mut out, &self.mode);
        out.extend_from_slice(&self.step.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let start = out.len();
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint format version {version} is not supported (this build reads version {VERSION}); \
                 load it with the release that wrote it and re-save, or retrain"
            )));
        }
        let flags = r.u32("flags")?;
        let mode = r.string("mode tag")?;
        let step = r.u64("step counter")?;
        let config = r.string("config")?;
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for i in 0..count {
            let name = r.string(&format!("name of tensor {i}"))?;
            if r.u8(&format!("dtype of `{name}`"))? != DTYPE_F32 {
                return Err(Error::Format(format!("tensor `{name}` has an unsupported dtype")));
            }
            let rank = r.u32(&format!("rank of `{name}`"))? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u64(&format!("dims of `{name}`"))? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let bytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let payload = r.take(bytes, &format!("payload of `{name}`"))?;
            let crc = r.u32(&format!("checksum of `{name}`"))?;
            if crc32fast::hash(payload) != crc {
                return Err(Error::Format(format!("checksum mismatch in tensor `{name}`")));
            }
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
                return Err(Error::Format(format!("duplicate tensor `{name}`")));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes after the tensor table", buf.len() - r.pos)));
        }
        Ok(Checkpoint {
            mode,
            step,
            inference_only: flags & FLAG_INFERENCE_ONLY != 0,
            config,
            tensors,
        })
    }

    /// Writes atomically through a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hex SHA-256 of the serialized bytes.
    pub fn digest(&self) -> String {
        hex_digest(&self.to_bytes())
    }

    pub fn expect_mode(&self, mode: &str) -> Result<()> {
        if self.mode != mode {
            return Err(Error::ModeMismatch {
                expected: mode.to_string(),
                found: self.mode.clone(),
            });
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
    }

    /// Training state plus config: parameters, optimizer moments, running
    /// statistics and step counter.
    pub fn from_state(cfg: &TrainConfig, state: &TrainState) -> Self {
        let model = &state.model;
        let mut tensors = BTreeMap::new();
        for (n, t) in model.params.iter() {
            tensors.insert(n.clone(), t.clone());
        }
        for (n, m) in &state.optim.m {
            tensors.insert(format!("optim.m.{n}"), Tensor::from_vec(m.clone()));
        }
        for (n, v) in &state.optim.v {
            tensors.insert(format!("optim.v.{n}"), Tensor::from_vec(v.clone()));
        }
        insert_stats(&mut tensors, &model.stats);
        Checkpoint {
            mode: cfg.model.mode.as_str().to_string(),
            step: state.step,
            inference_only: false,
            config: config_echo(cfg, &[]),
            tensors,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let (cfg, _) = parse_echo(&self.config)?;
        if cfg.model.mode.as_str() != self.mode {
            return Err(Error::Format("config echo disagrees with the mode tag".into()));
        }
        Ok(cfg)
    }

    pub fn to_state(&self) -> Result<(TrainConfig, TrainState)> {
        if self.inference_only {
            return Err(Error::Format("inference-only artifact cannot resume training".into()));
        }
        let cfg = self.train_config()?;
        let mut params = ParamStore::new();
        let mut optim = AdamW::new(cfg.optim);
        optim.step = self.step;
        for (name, t) in &self.tensors {
            if let Some(p) = name.strip_prefix("optim.m.") {
                optim.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = name.strip_prefix("optim.v.") {
                optim.v.insert(p.to_string(), t.data().to_vec());
            } else if !name.starts_with("stats.") {
                params.insert(name.clone(), t.clone());
            }
        }
        let stats = self.read_stats(&cfg)?;
        for name in optim.m.keys().chain(optim.v.keys()) {
            match params.get(name) {
                Some(t) if t.numel() == optim.m.get(name).map_or(t.numel(), Vec::len) => {}
                _ => return Err(Error::Format(format!("optimizer moment for unknown tensor `{name}`"))),
            }
        }
        let model = Model::from_parts(cfg.model.clone(), params, stats)?;
        Ok((cfg, TrainState { model, optim, step: self.step }))
    }

    fn read_stats(&self, cfg: &TrainConfig) -> Result<RunningStats> {
        let layers = cfg.model.image.channels.len();
        let mut stats = RunningStats::new(&cfg.model.image);
        for l in 0..layers {
            stats.mean[l] = self.tensor(&format!("stats.mean.{l}"))?.data().to_vec();
            stats.var[l] = self.tensor(&format!("stats.var.{l}"))?.data().to_vec();
        }
        Ok(stats)
    }
}

fn insert_stats(tensors: &mut BTreeMap<String, Tensor<f32>>, stats: &RunningStats) {
    for (l, (m, v)) in stats.mean.iter().zip(&stats.var).enumerate() {
        tensors.insert(format!("stats.mean.{l}"), Tensor::from_vec(m.clone()));
        tensors.insert(format!("stats.var.{l}"), Tensor::from_vec(v.clone()));
    }
}

fn config_echo(cfg: &TrainConfig, extra: &[(String, String)]) -> String {
    let mut s = cfg.to_text();
    s.push_str(&format!("layout = {}\n", param_layout(&cfg.model.image).describe()));
    for (k, v) in extra {
        s.push_str(&format!("{k} = {v}\n"));
    }
    s
}

/// Splits an echo into the config and any non-config `extra.*` lines,
/// checking the recorded layout against the architecture.
fn parse_echo(text: &str) -> Result<(TrainConfig, BTreeMap<String, String>)> {
    let mut cfg = TrainConfig::default();
    let mut layout = None;
    let mut extra = BTreeMap::new();
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        let (k, v) = (k.trim(), v.trim());
        if k == "layout" {
            layout = Some(v.to_string());
        } else if k.starts_with("class.") {
            extra.insert(k.to_string(), v.to_string());
        } else {
            cfg.set(k, v)?;
        }
    }
    let expected = param_layout(&cfg.model.image).describe();
    if layout.as_deref() != Some(expected.as_str()) {
        return Err(Error::Format(format!(
            "recorded norm layout `{}` does not match the architecture `{expected}`",
            layout.unwrap_or_default()
        )));
    }
    Ok((cfg, extra))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Loads a training checkpoint, refusing one written in another mode.
pub fn load_checkpoint(path: &Path, mode: Option<ModelMode>) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)?;
    if ck.inference_only {
        return Err(Error::ModeMismatch {
            expected: mode.map_or("training checkpoint", |m| m.as_str()).to_string(),
            found: ck.mode.clone(),
        });
    }
    if let Some(m) = mode {
        ck.expect_mode(m.as_str())?;
    }
    Ok(ck)
}

pub fn classifier_to_checkpoint(clf: &DeployedClassifier) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    for (n, t) in clf.fixed.iter() {
        tensors.insert(n.clone(), t.clone());
    }
    tensors.insert("norms.flat".into(), clf.norms.to_tensor());
    tensors.insert("head".into(), clf.head.clone());
    insert_stats(&mut tensors, &clf.stats);
    let mut cfg = TrainConfig::default();
    cfg.model.image = clf.encoder.cfg.clone();
    cfg.model.text.embed_dim = clf.encoder.cfg.embed_dim;
    let names: Vec<(String, String)> = clf
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| (format!("class.{i}"), n.clone()))
        .collect();
    Checkpoint {
        mode: CLASSIFIER_TAG.into(),
        step: 0,
        inference_only: true,
        config: config_echo(&cfg, &names),
        tensors,
    }
}

pub fn classifier_from_checkpoint(ck: &Checkpoint) -> Result<DeployedClassifier> {
    if !ck.inference_only || ck.mode != CLASSIFIER_TAG {
        return Err(Error::ModeMismatch {
            expected: CLASSIFIER_TAG.into(),
            found: ck.mode.clone(),
        });
    }
    let (cfg, extra) = parse_echo(&ck.config)?;
    let encoder = ImageEncoder::new(cfg.model.image.clone())?;
    let mut fixed = ParamStore::new();
    for (n, t) in ck.tensors.iter().filter(|(n, _)| n.starts_with("image.")) {
        fixed.insert(n.clone(), t.clone());
    }
    let norms = NormParamSet::new(ck.tensor("norms.flat")?.data().to_vec(), encoder.layout().clone())?;
    let head = ck.tensor("head")?.clone();
    let k = head.shape().first().copied().unwrap_or(0);
    let class_names = (0..k)
        .map(|i| {
            extra
                .get(&format!("class.{i}"))
                .cloned()
                .ok_or_else(|| Error::Format(format!("missing name of class {i}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let stats = ck.read_stats(&cfg)?;
    Ok(DeployedClassifier {
        encoder,
        fixed,
        norms,
        stats,
        head,
        class_names,
    })
}

pub fn save_classifier(clf: &DeployedClassifier, path: &Path) -> Result<()> {
    classifier_to_checkpoint(clf).save(path)
}

pub fn load_classifier(path: &Path) -> Result<DeployedClassifier> {
    classifier_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> (TrainConfig, TrainState) {
        let mut cfg = TrainConfig::default();
        cfg.batch_size = 4;
        cfg.steps = 1;
        cfg.model.image.resolution = 16;
        let out = crate::train::run_training(&cfg, None).unwrap();
        (cfg, out.state)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let (cfg, st) = state();
        let ck = Checkpoint::from_state(&cfg, &st);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let (cfg2, st2) = back.to_state().unwrap();
        assert_eq!(cfg2, cfg);
        assert_eq!(st2.model.params, st.model.params);
        assert_eq!(st2.optim, st.optim);
        assert_eq!(st2.model.stats, st.model.stats);
    }

    #[test]
    fn corruption_is_detected() {
        let (cfg, st) = state();
        let bytes = Checkpoint::from_state(&cfg, &st).to_bytes();
        let mut flipped = bytes.clone();
        let at = bytes.len() - 10;
        flipped[at] ^= 0x40;
        let err = Checkpoint::from_bytes(&flipped).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset, bytes.len() - 3),
            other => panic!("{other:?}"),
        }
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).unwrap_err().to_string().contains("magic"));
        let mut ver = bytes;
        ver[8] = 9;
        assert!(Checkpoint::from_bytes(&ver).unwrap_err().to_string().contains("version 9"));
    }

    #[test]
    fn mode_tag_is_enforced() {
        let (cfg, st) = state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        Checkpoint::from_state(&cfg, &st).save(&path).unwrap();
        load_checkpoint(&path, Some(ModelMode::HyperClip)).unwrap();
        match load_checkpoint(&path, Some(ModelMode::Baseline)) {
            Err(Error::ModeMismatch { expected, found }) => {
                assert_eq!((expected.as_str(), found.as_str()), ("baseline", "hyperclip"))
            }
            other => panic!("{other:?}"),
        }
    }
}
