//! Small convolutional image encoder whose normalization scale and bias are
//! supplied from outside on every forward pass.
//!
//! Each block is `conv3x3 -> norm -> GELU`. The norm parameters live in one
//! flat vector described by a [`ParamLayout`]; scales are stored as
//! pre-activations `g` and applied as `exp(g)`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamStore};
use crate::tensor::{channel_stats, Graph, Mode, Real, Tensor, Var, NORM_EPS};

/// Which statistics normalize activations in train mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormStats {
    /// Running estimates; batch statistics only feed the running update.
    Running,
    /// Statistics of the current batch.
    Batch,
}

impl NormStats {
    pub fn as_str(self) -> &'static str {
        match self {
            NormStats::Running => "running",
            NormStats::Batch => "batch",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "running" => Some(NormStats::Running),
            "batch" => Some(NormStats::Batch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageConfig {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub embed_dim: usize,
    pub resolution: usize,
    pub momentum: f64,
    pub norm_stats: NormStats,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            in_channels: 3,
            channels: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            embed_dim: 64,
            resolution: 32,
            momentum: 0.1,
            norm_stats: NormStats::Running,
        }
    }
}

impl ImageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return Err(Error::config("image.channels", "need one stride per conv layer"));
        }
        if self.channels.contains(&0) || self.in_channels == 0 || self.embed_dim == 0 {
            return Err(Error::config("image.channels", "channel counts must be positive"));
        }
        if let Some(s) = self.strides.iter().find(|&&s| s != 1 && s != 2) {
            return Err(Error::config("image.strides", format!("stride {s} is not 1 or 2")));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("image.momentum", "must lie in [0, 1]"));
        }
        if self.resolution < self.min_resolution() {
            return Err(Error::config(
                "image.resolution",
                format!("below the minimum {} for this stride plan", self.min_resolution()),
            ));
        }
        Ok(())
    }

    /// Smallest accepted input height and width.
    pub fn min_resolution(&self) -> usize {
        self.strides.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    Scale,
    Bias,
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::Scale => "scale",
            NormKind::Bias => "bias",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub layer: String,
    pub kind: NormKind,
    pub channels: usize,
    pub offset: usize,
}

impl fmt::Display for LayoutEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}@{}", self.layer, self.kind, self.channels, self.offset)
    }
}

/// Ordered map of the flat norm vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<LayoutEntry>,
    total: usize,
}

impl ParamLayout {
    /// Scale then bias for each normalized layer, packed contiguously.
    pub fn from_channels(channels: &[usize]) -> Self {
        let mut entries = Vec::with_capacity(2 * channels.len());
        let mut off = 0;
        for (i, &c) in channels.iter().enumerate() {
            for kind in [NormKind::Scale, NormKind::Bias] {
                entries.push(LayoutEntry {
                    layer: format!("image.norm{i}"),
                    kind,
                    channels: c,
                    offset: off,
                });
                off += c;
            }
        }
        ParamLayout { entries, total: off }
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    /// Length M of the flat vector.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn layers(&self) -> usize {
        self.entries.len() / 2
    }

    /// `(scale offset, bias offset, channels)` of normalized layer `i`.
    pub fn layer(&self, i: usize) -> (usize, usize, usize) {
        let s = &self.entries[2 * i];
        (s.offset, self.entries[2 * i + 1].offset, s.channels)
    }

    /// Fails on the first entry that differs from `expected`.
    pub fn check_matches(&self, expected: &ParamLayout) -> Result<()> {
        let n = self.entries.len().max(expected.entries.len());
        for i in 0..n {
            let (a, b) = (expected.entries.get(i), self.entries.get(i));
            if a != b {
                let show = |e: Option<&LayoutEntry>| e.map_or("<none>".to_string(), |e| e.to_string());
                return Err(Error::LayoutMismatch {
                    index: i,
                    expected: show(a),
                    found: show(b),
                });
            }
        }
        Ok(())
    }

    /// Compact text form, `name:kind:channels@offset` joined by commas.
    pub fn describe(&self) -> String {
        self.entries.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(",")
    }
}

pub fn param_layout(cfg: &ImageConfig) -> ParamLayout {
    ParamLayout::from_channels(&cfg.channels)
}

/// Flat norm pre-activations plus their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParamSet {
    flat: Vec<f32>,
    layout: ParamLayout,
}

impl NormParamSet {
    pub fn new(flat: Vec<f32>, layout: ParamLayout) -> Result<Self> {
        if flat.len() != layout.total() {
            return Err(Error::invalid(format!(
                "norm vector has {} values, layout needs {}",
                flat.len(),
                layout.total()
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("norm vector value {i} is not finite")));
        }
        Ok(NormParamSet { flat, layout })
    }

    /// `g = 0`, `b = 0`: unit scale, zero shift.
    pub fn identity(layout: ParamLayout) -> Self {
        NormParamSet {
            flat: vec![0.0; layout.total()],
            layout,
        }
    }

    pub fn flat(&self) -> &[f32] {
        &self.flat
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    /// Effective `gamma = exp(g)` of layer `i`.
    pub fn gamma(&self, i: usize) -> Vec<f32> {
        let (s, _, c) = self.layout.layer(i);
        self.flat[s..s + c].iter().map(|g| g.exp()).collect()
    }

    pub fn beta(&self, i: usize) -> &[f32] {
        let (_, b, c) = self.layout.layer(i);
        &self.flat[b..b + c]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(self.flat.clone())
    }
}

/// Per-layer population estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<Vec<f32>>,
    pub var: Vec<Vec<f32>>,
    pub momentum: f32,
}

/// Batch statistics observed in one train-mode forward: per-layer mean and
/// unbiased variance.
pub type BatchStats = Vec<(Vec<f64>, Vec<f64>)>;

impl RunningStats {
    pub fn new(cfg: &ImageConfig) -> Self {
        RunningStats {
            mean: cfg.channels.iter().map(|&c| vec![0.0; c]).collect(),
            var: cfg.channels.iter().map(|&c| vec![1.0; c]).collect(),
            momentum: cfg.momentum as f32,
        }
    }

    /// `r <- (1 - m) r + m b` for every layer.
    pub fn absorb(&mut self, batch: &BatchStats) -> Result<()> {
        if batch.len() != self.mean.len() {
            return Err(Error::invalid("batch statistics do not match the layer count"));
        }
        let m = self.momentum;
        for (l, (bm, bv)) in batch.iter().enumerate() {
            if bm.len() != self.mean[l].len() || bv.len() != self.var[l].len() {
                return Err(Error::invalid(format!("batch statistics width mismatch at layer {l}")));
            }
            for (r, &b) in self.mean[l].iter_mut().zip(bm) {
                *r = (1.0 - m) * *r + m * b as f32;
            }
            for (r, &b) in self.var[l].iter_mut().zip(bv) {
                *r = ((1.0 - m) * *r + m * b as f32).max(0.0);
            }
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.var.iter().flatten().all(|v| *v >= 0.0 && v.is_finite())
            && self.mean.iter().flatten().all(|v| v.is_finite())
    }
}

/// Outputs of one encoder forward.
pub struct ImageForward {
    /// `[N, D]` unit rows.
    pub embeddings: Var,
    /// Normalized, pre-nonlinearity activation of every block.
    pub post_norm: Vec<Var>,
    /// Empty in eval mode.
    pub batch_stats: BatchStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub cfg: ImageConfig,
    layout: ParamLayout,
}

impl ImageEncoder {
    pub fn new(cfg: ImageConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = param_layout(&cfg);
        Ok(ImageEncoder { cfg, layout })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Conv kernels and the output projection (Kaiming / `1/sqrt(fan_in)`).
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut c_in = self.cfg.in_channels;
        for (i, &c) in self.cfg.channels.iter().enumerate() {
            let std = (2.0 / (c_in * 9) as f64).sqrt();
            store.insert(format!("image.conv{i}.w"), nn::normal_tensor(rng, &[c, c_in, 3, 3], std));
            c_in = c;
        }
        let std = 1.0 / (c_in as f64).sqrt();
        store.insert("image.proj.w", nn::normal_tensor(rng, &[c_in, self.cfg.embed_dim], std));
        store.insert("image.proj.b", Tensor::zeros(&[self.cfg.embed_dim]));
    }

    /// `images: [N, C, H, W]`, `norms: [M]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        images: Var,
        norms: Var,
        stats: &RunningStats,
        mode: Mode,
    ) -> Result<ImageForward> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.in_channels {
            return Err(Error::invalid(format!(
                "images must be [N, {}, H, W], got {shape:?}",
                self.cfg.in_channels
            )));
        }
        let min = self.cfg.min_resolution();
        if shape[2] < min || shape[3] < min {
            return Err(Error::invalid(format!(
                "image size {}x{} below the minimum {min}x{min}",
                shape[2], shape[3]
            )));
        }
        if g.shape(norms) != [self.layout.total()] {
            return Err(Error::invalid(format!(
                "norm vector shape {:?}, layout needs [{}]",
                g.shape(norms),
                self.layout.total()
            )));
        }
        let use_batch = mode == Mode::Train && self.cfg.norm_stats == NormStats::Batch;
        let mut x = images;
        let mut post_norm = Vec::with_capacity(self.cfg.channels.len());
        let mut batch_stats = Vec::new();
        for (i, &stride) in self.cfg.strides.iter().enumerate() {
            x = g.conv2d(x, p.get(&format!("image.conv{i}.w"))?, stride)?;
            let (so, bo, c) = self.layout.layer(i);
            let gamma = g.slice(norms, so, c)?;
            let gamma = g.exp(gamma)?;
            let beta = g.slice(norms, bo, c)?;
            let s = g.shape(x).to_vec();
            let count = s[0] * s[2] * s[3];
            let y = if use_batch {
                let out = g.batch_norm_train(x, gamma, beta, NORM_EPS)?;
                batch_stats.push(unbias(&out.mean, &out.var, count));
                out.out
            } else {
                if mode == Mode::Train {
                    let (m, v) = channel_stats(g.data(x), s[0], c, s[2] * s[3]);
                    batch_stats.push(unbias(&m, &v, count));
                }
                let mean = g.constant(to_tensor(&stats.mean[i]));
                let var = g.constant(to_tensor(&stats.var[i]));
                g.batch_norm_apply(x, mean, var, gamma, beta, NORM_EPS)?
            };
            post_norm.push(y);
            x = g.gelu(y)?;
        }
        let pooled = g.global_avg_pool(x)?;
        let e = nn::linear(g, p, "image.proj", pooled)?;
        let embeddings = g.l2_normalize(e)?;
        Ok(ImageForward {
            embeddings,
            post_norm,
            batch_stats,
        })
    }

    /// Graph-free convenience: embeds `images` and, in train mode, folds the
    /// batch statistics into `stats`.
    pub fn encode_images(
        &self,
        fixed: &ParamStore,
        norms: &NormParamSet,
        stats: &mut RunningStats,
        images: &Tensor<f32>,
        mode: Mode,
    ) -> Result<Tensor<f32>> {
        norms.layout().check_matches(&self.layout)?;
        let mut g = Graph::<f32>::new();
        let p = fixed.bind(&mut g, |_| false);
        let x = g.constant(images.clone());
        let n = g.constant(norms.to_tensor());
        let out = self.forward(&mut g, &p, x, n, stats, mode)?;
        if mode == Mode::Train {
            stats.absorb(&out.batch_stats)?;
        }
        Ok(g.value(out.embeddings).clone())
    }

    /// Eval-mode embeddings computed in slices of `chunk` images.
    pub fn embed(
        &self,
        fixed: &ParamStore,
        norms: &NormParamSet,
        stats: &RunningStats,
        images: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        norms.layout().check_matches(&self.layout)?;
        let shape = images.shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::invalid(format!("images must be 4-d, got {shape:?}")));
        }
        let per = shape[1..].iter().product::<usize>();
        let mut out = Vec::with_capacity(shape[0] * self.cfg.embed_dim);
        for slab in images.data().chunks(EMBED_CHUNK * per) {
            let rows = slab.len() / per;
            let mut g = Graph::<f32>::new();
            let p = fixed.bind(&mut g, |_| false);
            let mut s = shape.clone();
            s[0] = rows;
            let x = g.constant(Tensor::new(s, slab.to_vec())?);
            let n = g.constant(norms.to_tensor());
            let f = self.forward(&mut g, &p, x, n, stats, Mode::Eval)?;
            out.extend_from_slice(g.data(f.embeddings));
        }
        Ok(Tensor::new(vec![shape[0], self.cfg.embed_dim], out)?)
    }
}

const EMBED_CHUNK: usize = 128;

fn unbias<T: Real>(mean: &[T], var: &[T], count: usize) -> (Vec<f64>, Vec<f64>) {
    let k = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    (
        mean.iter().map(|m| m.as_f64()).collect(),
        var.iter().map(|v| v.as_f64() * k).collect(),
    )
}

fn to_tensor<T: Real>(v: &[f32]) -> Tensor<T> {
    Tensor::from_vec(v.iter().map(|&x| T::of(x as f64)).collect())
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(scores: &[f32], k: usize) -> Vec<usize> {
    scores
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Self-contained zero-shot classifier: encoder weights, frozen norms and
/// statistics, and a `[K, D]` head.
#[derive(Debug, Clone, PartialEq)]
pub struct DeployedClassifier {
    pub encoder: ImageEncoder,
    pub fixed: ParamStore,
    pub norms: NormParamSet,
    pub stats: RunningStats,
    pub head: Tensor<f32>,
    pub class_names: Vec<String>,
}

impl DeployedClassifier {
    pub fn classes(&self) -> usize {
        self.head.shape()[0]
    }

    /// Scalar count of the image encoder (fixed weights plus norms).
    pub fn encoder_parameter_count(&self) -> usize {
        self.fixed.count("") + self.norms.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder_parameter_count() + self.head.numel()
    }

    pub fn embed(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.encoder.embed(&self.fixed, &self.norms, &self.stats, images)
    }

    /// `[N, K]` similarities `x · Y^T`.
    pub fn scores(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        scores(&self.embed(images)?, &self.head)
    }

    pub fn classify(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        Ok(argmax_rows(self.scores(images)?.data(), self.classes()))
    }
}

/// `x · head^T` for row-major `x: [N, D]` and `head: [K, D]`.
pub fn scores(x: &Tensor<f32>, head: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let hv = g.constant(head.clone());
    let ht = g.transpose(hv)?;
    let s = g.matmul(xv, ht)?;
    Ok(g.value(s).clone())
}

/// Packages frozen encoder state and class embeddings.
pub fn export_classifier(
    encoder: &ImageEncoder,
    fixed: &ParamStore,
    norms: &NormParamSet,
    stats: &RunningStats,
    class_embeddings: &Tensor<f32>,
    class_names: Vec<String>,
) -> Result<DeployedClassifier> {
    let s = class_embeddings.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::invalid("classifier needs at least one class embedding"));
    }
    if s[1] != encoder.cfg.embed_dim {
        return Err(Error::invalid(format!(
            "class embeddings have width {}, encoder emits {}",
            s[1], encoder.cfg.embed_dim
        )));
    }
    if class_names.len() != s[0] {
        return Err(Error::invalid("one class name per head row is required"));
    }
    norms.layout().check_matches(encoder.layout())?;
    let fixed = fixed.filter("image.");
    let mut fixed_only = ParamStore::new();
    for (n, t) in fixed.iter().filter(|(n, _)| n.as_str() != OWNED_NORMS) {
        fixed_only.insert(n.clone(), t.clone());
    }
    Ok(DeployedClassifier {
        encoder: encoder.clone(),
        fixed: fixed_only,
        norms: norms.clone(),
        stats: stats.clone(),
        head: class_embeddings.clone(),
        class_names,
    })
}

/// Name of the baseline's owned norm vector.
pub const OWNED_NORMS: &str = "image.norms";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn setup(cfg: ImageConfig) -> (ImageEncoder, ParamStore) {
        let enc = ImageEncoder::new(cfg).unwrap();
        let mut store = ParamStore::new();
        enc.init(&mut store, &mut substream(2, "init", 0));
        (enc, store)
    }

    fn images(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = substream(seed, "img", 0);
        Tensor::new(vec![n, 3, 16, 16], (0..n * 3 * 256).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn default_layout_has_224_entries() {
        let l = param_layout(&ImageConfig::default());
        assert_eq!(l.total(), 224);
        assert_eq!(l.entries().len(), 6);
        let mut off = 0;
        for e in l.entries() {
            assert_eq!(e.offset, off);
            off += e.channels;
        }
        let single = ParamLayout::from_channels(&[8]);
        assert_eq!(single.total(), 16);
        assert_eq!(single.entries()[0].kind, NormKind::Scale);
        assert_eq!(single.entries()[1].kind, NormKind::Bias);
    }

    #[test]
    fn zero_preactivation_means_unit_gamma() {
        let set = NormParamSet::identity(param_layout(&ImageConfig::default()));
        assert!(set.gamma(1).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn eval_is_deterministic_and_pure() {
        let (enc, store) = setup(ImageConfig::default());
        let norms = NormParamSet::identity(enc.layout().clone());
        let mut stats = RunningStats::new(&enc.cfg);
        let before = stats.clone();
        let x = images(3, 1);
        let a = enc.encode_images(&store, &norms, &mut stats, &x, Mode::Eval).unwrap();
        let b = enc.encode_images(&store, &norms, &mut stats, &x, Mode::Eval).unwrap();
        assert_eq!(a, b);
        assert_eq!(stats, before);
        for r in 0..3 {
            let n: f32 = a.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
        enc.encode_images(&store, &norms, &mut stats, &x, Mode::Train).unwrap();
        assert_ne!(stats, before);
        assert!(stats.is_valid());
    }

    #[test]
    fn doubling_gamma_doubles_post_norm() {
        let (enc, store) = setup(ImageConfig::default());
        let stats = RunningStats::new(&enc.cfg);
        let layout = enc.layout().clone();
        for layer in 0..3 {
            let mut flat = vec![0.0f32; layout.total()];
            let (so, _, c) = layout.layer(layer);
            flat[so..so + c].iter_mut().for_each(|g| *g = std::f32::consts::LN_2);
            let run = |flat: Vec<f32>| {
                let mut g = Graph::<f32>::new();
                let p = store.bind(&mut g, |_| false);
                let x = g.constant(images(2, 4));
                let n = g.constant(Tensor::from_vec(flat));
                let out = enc.forward(&mut g, &p, x, n, &stats, Mode::Eval).unwrap();
                g.data(out.post_norm[layer]).to_vec()
            };
            let base = run(vec![0.0; layout.total()]);
            let doubled = run(flat);
            for (a, b) in base.iter().zip(&doubled) {
                assert!((2.0 * a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} {b}");
            }
        }
    }

    #[test]
    fn layout_mismatch_names_entry() {
        let (enc, store) = setup(ImageConfig::default());
        let wrong = NormParamSet::identity(ParamLayout::from_channels(&[16, 32, 48]));
        let mut stats = RunningStats::new(&enc.cfg);
        let err = enc.encode_images(&store, &wrong, &mut stats, &images(1, 0), Mode::Eval).unwrap_err();
        match err {
            Error::LayoutMismatch { index, .. } => assert_eq!(index, 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn tiny_images_are_rejected() {
        let (enc, store) = setup(ImageConfig::default());
        let norms = NormParamSet::identity(enc.layout().clone());
        let mut stats = RunningStats::new(&enc.cfg);
        let x = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(enc.encode_images(&store, &norms, &mut stats, &x, Mode::Eval).is_err());
    }

    #[test]
    fn batch_statistics_switch_normalizes_per_batch() {
        let cfg = ImageConfig { norm_stats: NormStats::Batch, ..Default::default() };
        let (enc, store) = setup(cfg);
        let mut g = Graph::<f32>::new();
        let p = store.bind(&mut g, |_| false);
        let x = g.constant(images(4, 2));
        let n = g.constant(Tensor::zeros(&[224]));
        let stats = RunningStats::new(&enc.cfg);
        let out = enc.forward(&mut g, &p, x, n, &stats, Mode::Train).unwrap();
        let v = g.data(out.post_norm[0]);
        let hw = 256;
        let ch0: Vec<f32> = (0..4).flat_map(|i| v[i * 16 * hw..i * 16 * hw + hw].to_vec()).collect();
        let mean: f32 = ch0.iter().sum::<f32>() / ch0.len() as f32;
        assert!(mean.abs() < 1e-4);
        assert_eq!(out.batch_stats.len(), 3);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax_rows(&[0.9, 0.1], 2), vec![0]);
        assert_eq!(argmax_rows(&[0.0, 0.0, 0.0], 3), vec![0]);
        assert_eq!(argmax_rows(&[0.1, 0.5, 0.5], 3), vec![1]);
    }

    #[test]
    fn export_matches_pipeline_and_counts() {
        let (enc, store) = setup(ImageConfig::default());
        let mut rng = substream(9, "n", 0);
        let flat = (0..224).map(|_| rng.random_range(-0.3f32..0.3)).collect();
        let norms = NormParamSet::new(flat, enc.layout().clone()).unwrap();
        let stats = RunningStats::new(&enc.cfg);
        let mut head = crate::nn::normal_tensor(&mut rng, &[5, 64], 1.0);
        let rows: Vec<f32> = (0..5)
            .flat_map(|r| {
                let n = head.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
                head.row(r).iter().map(move |v| v / n).collect::<Vec<_>>()
            })
            .collect();
        head = Tensor::new(vec![5, 64], rows).unwrap();
        let names = (0..5).map(|i| format!("c{i}")).collect();
        let clf = export_classifier(&enc, &store, &norms, &stats, &head, names).unwrap();
        let x = images(7, 3);
        let direct = enc.embed(&store, &norms, &stats, &x).unwrap();
        let expect = argmax_rows(scores(&direct, &head).unwrap().data(), 5);
        assert_eq!(clf.classify(&x).unwrap(), expect);
        assert_eq!(clf.parameter_count() - 5 * 64, store.count("image.") + 224);
        let empty = Tensor::<f32>::zeros(&[0, 64]);
        assert!(export_classifier(&enc, &store, &norms, &stats, &empty, vec![]).is_err());
    }
}
