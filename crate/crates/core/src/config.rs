//! Run configuration and its flat `key = value` text form.

use std::fmt::Display;
use std::str::FromStr;

use crate::data::RenderConfig;
use crate::error::{Error, Result};
use crate::image_encoder::NormStats;
use crate::model::{ModelConfig, ModelMode};
use crate::optim::AdamWConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub optim: AdamWConfig,
    /// Steps of each calibration probe run when the weight scale is enabled.
    pub warmup_steps: u64,
    pub log_every: u64,
    pub noise: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            batch_size: 64,
            steps: 2000,
            seed: 0,
            optim: AdamWConfig::default(),
            warmup_steps: 100,
            log_every: 10,
            noise: 0.05,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Every key accepted by [`TrainConfig::set`].
pub const KEYS: &[&str] = &[
    "mode",
    "seed",
    "batch_size",
    "steps",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "eps",
    "weight_scale",
    "warmup_steps",
    "norm_stats",
    "log_every",
    "loss_chunk",
    "resolution",
    "noise",
    "embed_dim",
    "momentum",
    "image.channels",
    "image.strides",
    "text.vocab",
    "text.context",
    "text.layers",
    "text.width",
    "text.heads",
    "text.ff",
    "text.dropout",
    "hyper.layers",
    "hyper.width",
    "hyper.heads",
    "hyper.ff",
    "hyper.dropout",
    "hyper.bottleneck",
    "eta_raw_init",
    "zeta_init",
];

impl TrainConfig {
    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            size: self.model.image.resolution,
            noise: self.noise,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key {
            "mode" => {
                m.mode = ModelMode::parse(v).ok_or_else(|| {
                    Error::config(key, format!("unknown mode `{v}` (hyperclip, baseline, hyperclip_transformerless)"))
                })?
            }
            "seed" => self.seed = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.optim.lr = parse(key, v)?,
            "weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "beta1" => self.optim.beta1 = parse(key, v)?,
            "beta2" => self.optim.beta2 = parse(key, v)?,
            "eps" => self.optim.eps = parse(key, v)?,
            "weight_scale" => m.hyper.weight_scale = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "norm_stats" => {
                m.image.norm_stats = NormStats::parse(v)
                    .ok_or_else(|| Error::config(key, format!("expected `running` or `batch`, got `{v}`")))?
            }
            "log_every" => self.log_every = parse(key, v)?,
            "loss_chunk" => {
                let c: usize = parse(key, v)?;
                m.loss_chunk = (c > 0).then_some(c);
            }
            "resolution" => m.image.resolution = parse(key, v)?,
            "noise" => self.noise = parse(key, v)?,
            "embed_dim" => {
                let d = parse(key, v)?;
                m.text.embed_dim = d;
                m.image.embed_dim = d;
            }
            "momentum" => m.image.momentum = parse(key, v)?,
            "image.channels" => m.image.channels = parse_list(key, v)?,
            "image.strides" => m.image.strides = parse_list(key, v)?,
            "text.vocab" => m.text.vocab = parse(key, v)?,
            "text.context" => m.text.context = parse(key, v)?,
            "text.layers" => m.text.stack.layers = parse(key, v)?,
            "text.width" => m.text.stack.width = parse(key, v)?,
            "text.heads" => m.text.stack.heads = parse(key, v)?,
            "text.ff" => m.text.stack.ff = parse(key, v)?,
            "text.dropout" => m.text.stack.dropout = parse(key, v)?,
            "hyper.layers" => m.hyper.stack.layers = parse(key, v)?,
            "hyper.width" => m.hyper.stack.width = parse(key, v)?,
            "hyper.heads" => m.hyper.stack.heads = parse(key, v)?,
            "hyper.ff" => m.hyper.stack.ff = parse(key, v)?,
            "hyper.dropout" => m.hyper.stack.dropout = parse(key, v)?,
            "hyper.bottleneck" => m.hyper.bottleneck = parse(key, v)?,
            "eta_raw_init" => m.loss.eta_raw = parse(key, v)?,
            "zeta_init" => m.loss.zeta = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    /// All settings in [`KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "mode" => m.mode.to_string(),
                    "seed" => self.seed.to_string(),
                    "batch_size" => self.batch_size.to_string(),
                    "steps" => self.steps.to_string(),
                    "lr" => self.optim.lr.to_string(),
                    "weight_decay" => self.optim.weight_decay.to_string(),
                    "beta1" => self.optim.beta1.to_string(),
                    "beta2" => self.optim.beta2.to_string(),
                    "eps" => self.optim.eps.to_string(),
                    "weight_scale" => m.hyper.weight_scale.to_string(),
                    "warmup_steps" => self.warmup_steps.to_string(),
                    "norm_stats" => m.image.norm_stats.as_str().to_string(),
                    "log_every" => self.log_every.to_string(),
                    "loss_chunk" => m.loss_chunk.unwrap_or(0).to_string(),
                    "resolution" => m.image.resolution.to_string(),
                    "noise" => self.noise.to_string(),
                    "embed_dim" => m.image.embed_dim.to_string(),
                    "momentum" => m.image.momentum.to_string(),
                    "image.channels" => join(&m.image.channels),
                    "image.strides" => join(&m.image.strides),
                    "text.vocab" => m.text.vocab.to_string(),
                    "text.context" => m.text.context.to_string(),
                    "text.layers" => m.text.stack.layers.to_string(),
                    "text.width" => m.text.stack.width.to_string(),
                    "text.heads" => m.text.stack.heads.to_string(),
                    "text.ff" => m.text.stack.ff.to_string(),
                    "text.dropout" => m.text.stack.dropout.to_string(),
                    "hyper.layers" => m.hyper.stack.layers.to_string(),
                    "hyper.width" => m.hyper.stack.width.to_string(),
                    "hyper.heads" => m.hyper.stack.heads.to_string(),
                    "hyper.ff" => m.hyper.stack.ff.to_string(),
                    "hyper.dropout" => m.hyper.stack.dropout.to_string(),
                    "hyper.bottleneck" => m.hyper.bottleneck.to_string(),
                    "eta_raw_init" => m.loss.eta_raw.to_string(),
                    "zeta_init" => m.loss.zeta.to_string(),
                    _ => unreachable!("key list and serializer disagree"),
                };
                (k, v)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Applies `key = value` lines onto `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every", "must be at least 1"));
        }
        if !(self.optim.lr >= 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) {
            return Err(Error::config("beta1", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.optim.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if !(self.optim.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise", "must be non-negative"));
        }
        if let Some(c) = self.model.loss_chunk {
            if c > self.batch_size {
                return Err(Error::config("loss_chunk", "must not exceed batch_size"));
            }
        }
        if self.model.text.context < 8 {
            return Err(Error::config("text.context", "captions need at least 8 positions"));
        }
        if self.model.text.vocab < crate::data::Vocabulary::default().len() {
            return Err(Error::config("text.vocab", "smaller than the caption vocabulary"));
        }
        crate::model::Model::new(self.model.clone(), 0).map(|_| ())
    }
}
