//! The three trainable components wired together for each training mode.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::hypernet::{Hypernet, HypernetConfig};
use crate::image_encoder::{BatchStats, ImageConfig, ImageEncoder, NormParamSet, RunningStats, OWNED_NORMS};
use crate::loss::{self, LossParams};
use crate::nn::{Bound, ParamStore};
use crate::rng::substream;
use crate::tensor::{Graph, Mode, Real, Tensor, Var};
use crate::text_encoder::{TextBatch, TextConfig, TextEncoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModelMode {
    HyperClip,
    Baseline,
    HyperClipTransformerless,
}

impl ModelMode {
    pub const ALL: [ModelMode; 3] = [ModelMode::HyperClip, ModelMode::Baseline, ModelMode::HyperClipTransformerless];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::HyperClip => "hyperclip",
            ModelMode::Baseline => "baseline",
            ModelMode::HyperClipTransformerless => "hyperclip_transformerless",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn uses_hypernet(self) -> bool {
        self != ModelMode::Baseline
    }
}

impl std::fmt::Display for ModelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub text: TextConfig,
    pub image: ImageConfig,
    pub hyper: HypernetConfig,
    pub loss: LossParams,
    /// Block size of the chunked loss; `None` uses the monolithic form.
    pub loss_chunk: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: ModelMode::HyperClip,
            text: TextConfig::default(),
            image: ImageConfig::default(),
            hyper: HypernetConfig::default(),
            loss: LossParams::default(),
            loss_chunk: None,
        }
    }
}

/// Counts of text-encoder and hypernet forward passes.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    text: AtomicUsize,
    hyper: AtomicUsize,
}

impl ForwardCounters {
    pub fn text(&self) -> usize {
        self.text.load(Ordering::Relaxed)
    }

    pub fn hyper(&self) -> usize {
        self.hyper.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.text.store(0, Ordering::Relaxed);
        self.hyper.store(0, Ordering::Relaxed);
    }
}

impl Clone for ForwardCounters {
    fn clone(&self) -> Self {
        ForwardCounters {
            text: AtomicUsize::new(self.text()),
            hyper: AtomicUsize::new(self.hyper()),
        }
    }
}

pub struct ModelForward {
    pub loss: Var,
    /// Image embeddings `[B, D]`.
    pub x: Var,
    /// Text embeddings `[B, D]`.
    pub y: Var,
    /// Norm vector fed to the image encoder.
    pub norms: Var,
    /// Hypernet output before the weight scale.
    pub raw: Option<Var>,
    pub batch_stats: BatchStats,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub hyper: Option<Hypernet>,
    pub params: ParamStore,
    pub stats: RunningStats,
    pub counters: ForwardCounters,
}

impl Model {
    /// Fresh model. Text and image weights depend only on the seed, so runs in
    /// different modes start from the same encoders.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::skeleton(cfg)?;
        m.text.init(&mut m.params, &mut substream(seed, "init.text", 0));
        m.image.init(&mut m.params, &mut substream(seed, "init.image", 0));
        if let Some(h) = &m.hyper {
            h.init(&mut m.params, &mut substream(seed, "init.hyper", 0));
        } else {
            m.params.insert(OWNED_NORMS, Tensor::zeros(&[m.image.layout().total()]));
        }
        m.cfg.loss.init(&mut m.params);
        Ok(m)
    }

    fn skeleton(cfg: ModelConfig) -> Result<Self> {
        if cfg.text.embed_dim != cfg.image.embed_dim {
            return Err(Error::config("text.embed_dim", "must equal image.embed_dim"));
        }
        let text = TextEncoder::new(cfg.text.clone())?;
        let image = ImageEncoder::new(cfg.image.clone())?;
        let hyper = if cfg.mode.uses_hypernet() {
            let mut hc = cfg.hyper.clone();
            hc.transformerless = cfg.mode == ModelMode::HyperClipTransformerless;
            Some(Hypernet::new(hc, cfg.text.embed_dim, image.layout())?)
        } else {
            None
        };
        let stats = RunningStats::new(&cfg.image);
        Ok(Model {
            cfg,
            text,
            image,
            hyper,
            params: ParamStore::new(),
            stats,
            counters: ForwardCounters::default(),
        })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes against
    /// a fresh initialization.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore, stats: RunningStats) -> Result<Self> {
        let template = Self::new(cfg, 0)?;
        for (name, t) in template.params.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.names().find(|n| !template.params.contains(n)) {
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        let shapes_ok = stats.mean.len() == template.stats.mean.len()
            && stats.mean.iter().zip(&template.stats.mean).all(|(a, b)| a.len() == b.len())
            && stats.var.iter().zip(&template.stats.var).all(|(a, b)| a.len() == b.len());
        if !shapes_ok || !stats.is_valid() {
            return Err(Error::Format("running statistics do not match the architecture".into()));
        }
        Ok(Model {
            params,
            stats,
            ..template
        })
    }

    pub fn mode(&self) -> ModelMode {
        self.cfg.mode
    }

    /// Full training-path forward: captions -> text -> (hypernet) -> image -> loss.
    pub fn forward<T: Real, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
        captions: &TextBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelForward> {
        let y = self.text.forward(g, p, captions, mode, rng)?;
        self.counters.text.fetch_add(1, Ordering::Relaxed);
        let (norms, raw) = match &self.hyper {
            Some(h) => {
                let out = h.forward(g, p, y, mode, rng)?;
                self.counters.hyper.fetch_add(1, Ordering::Relaxed);
                (out.params, Some(out.raw))
            }
            None => (p.get(OWNED_NORMS)?, None),
        };
        let img = self.image.forward(g, p, images, norms, &self.stats, mode)?;
        let (eta, zeta) = (p.get(loss::ETA_RAW)?, p.get(loss::ZETA)?);
        let l = match self.cfg.loss_chunk {
            Some(c) => loss::siglip_loss_chunked(g, img.embeddings, y, eta, zeta, c)?,
            None => loss::siglip_loss(g, img.embeddings, y, eta, zeta)?,
        };
        Ok(ModelForward {
            loss: l,
            x: img.embeddings,
            y,
            norms,
            raw,
            batch_stats: img.batch_stats,
        })
    }

    /// Eval-mode text embeddings `[N, D]`, one forward pass.
    pub fn embed_text(&self, captions: &TextBatch) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let p = self.params.filter("text.").bind(&mut g, |_| false);
        let y = self.text.forward(&mut g, &p, captions, Mode::Eval, &mut substream(0, "unused", 0))?;
        self.counters.text.fetch_add(1, Ordering::Relaxed);
        Ok(g.value(y).clone())
    }

    /// Norm parameters for a set of text embeddings: the hypernet output, or
    /// the owned vector in baseline mode.
    pub fn norms_for(&self, y: &Tensor<f32>) -> Result<NormParamSet> {
        let layout = self.image.layout().clone();
        let Some(h) = &self.hyper else {
            return NormParamSet::new(self.params.require(OWNED_NORMS)?.data().to_vec(), layout);
        };
        let mut g = Graph::<f32>::new();
        let p = self.params.filter("hyper.").bind(&mut g, |_| false);
        let yv = g.constant(y.clone());
        let out = h.forward(&mut g, &p, yv, Mode::Eval, &mut substream(0, "unused", 0))?;
        self.counters.hyper.fetch_add(1, Ordering::Relaxed);
        NormParamSet::new(g.data(out.params).to_vec(), layout)
    }

    /// Unscaled hypernet output norm for `y`; `None` in baseline mode.
    pub fn raw_hyper_norm(&self, y: &Tensor<f32>) -> Result<Option<f64>> {
        let Some(h) = &self.hyper else { return Ok(None) };
        let mut g = Graph::<f32>::new();
        let p = self.params.filter("hyper.").bind(&mut g, |_| false);
        let yv = g.constant(y.clone());
        let out = h.forward(&mut g, &p, yv, Mode::Eval, &mut substream(0, "unused", 0))?;
        Ok(Some(g.value(out.raw).l2_norm()))
    }

    /// Image-encoder tensors other than the owned norm vector.
    pub fn fixed_image_params(&self) -> ParamStore {
        let mut out = self.params.filter("image.");
        out.remove(OWNED_NORMS);
        out
    }

    pub fn embed_images(&self, norms: &NormParamSet, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.image.embed(&self.fixed_image_params(), norms, &self.stats, images)
    }
}
