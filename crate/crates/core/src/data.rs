//! Procedural paired corpus: coloured shapes with fixed-template captions.
//!
//! Every sample is addressable by `(seed, stream, index)` so nothing is ever
//! stored. Batches are class-balanced rounds of the 16 classes.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream_key, substream};
use crate::tensor::Tensor;
use crate::text_encoder::TextBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const NUM_CLASSES: usize = 16;
/// Style groups: 0 = filled, 1 = thin outline.
pub const NUM_GROUPS: usize = 2;
pub const BACKGROUND: f32 = 0.5;

impl Shape {
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Cross => "cross",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.2],
            Color::Blue => [0.15, 0.25, 0.95],
            Color::Yellow => [0.95, 0.9, 0.1],
        }
    }
}

/// Class index `shape * 4 + color`.
pub fn class_of(shape: Shape, color: Color) -> usize {
    shape as usize * 4 + color as usize
}

pub fn class_parts(class: usize) -> (Shape, Color) {
    (SHAPES[class / 4], COLORS[class % 4])
}

pub fn class_name(class: usize) -> String {
    let (s, c) = class_parts(class);
    format!("{} {}", c.word(), s.word())
}

/// Fixed word-level token table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<&'static str>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut words = vec!["<pad>", "<bos>", "<eot>", "a", "photo", "of"];
        words.extend(COLORS.iter().map(|c| c.word()));
        words.extend(SHAPES.iter().map(|s| s.word()));
        Vocabulary { words }
    }
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOT: usize = 2;

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|&w| w == word)
    }

    pub fn word(&self, id: usize) -> Option<&'static str> {
        self.words.get(id).copied()
    }

    /// `BOS words... EOT`; unknown words are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = vec![Self::BOS];
        for w in text.split_whitespace() {
            let id = self
                .id(&w.to_lowercase())
                .filter(|&id| id > Self::EOT)
                .ok_or_else(|| Error::invalid(format!("word `{w}` is not in the vocabulary")))?;
            out.push(id);
        }
        out.push(Self::EOT);
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > Self::EOT)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn prompt_text(class: usize) -> String {
    format!("a photo of a {}", class_name(class))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub id: u64,
    pub shape: Shape,
    pub color: Color,
    /// Centre offset in pixels.
    pub jitter: (f32, f32),
    pub noise_seed: u64,
    pub group: usize,
}

impl SampleSpec {
    pub fn class(&self) -> usize {
        class_of(self.shape, self.color)
    }

    /// Spec for sample `id` of the named stream with a given class.
    pub fn draw(seed: u64, stream: &str, id: u64, class: usize) -> Self {
        let mut rng = substream(seed, stream, id);
        let (shape, color) = class_parts(class);
        let jx = rng.random_range(-3.0f32..=3.0);
        let jy = rng.random_range(-3.0f32..=3.0);
        let group = rng.random_range(0..NUM_GROUPS);
        SampleSpec {
            id,
            shape,
            color,
            jitter: (jx, jy),
            noise_seed: rng.random(),
            group,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub size: usize,
    pub noise: f32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { size: 32, noise: 0.05 }
    }
}

fn sd_box(px: f32, py: f32, hx: f32, hy: f32) -> f32 {
    let qx = px.abs() - hx;
    let qy = py.abs() - hy;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

/// Signed distance to an upward equilateral triangle of circumradius `r`.
fn sd_triangle(px: f32, py: f32, r: f32) -> f32 {
    let k = 3f32.sqrt();
    let side = r * k * 0.5;
    let mut x = px.abs() - side;
    let mut y = -py + r * 0.5;
    if x + k * y > 0.0 {
        let (nx, ny) = ((x - k * y) * 0.5, (-k * x - y) * 0.5);
        x = nx;
        y = ny;
    }
    x -= x.clamp(-2.0 * side, 0.0);
    -(x * x + y * y).sqrt() * y.signum()
}

fn signed_distance(shape: Shape, px: f32, py: f32, r: f32) -> f32 {
    match shape {
        Shape::Circle => (px * px + py * py).sqrt() - r,
        Shape::Square => sd_box(px, py, 0.8 * r, 0.8 * r),
        Shape::Triangle => sd_triangle(px, py - 0.35 * r, 1.15 * r),
        Shape::Cross => sd_box(px, py, r, 0.33 * r).min(sd_box(px, py, 0.33 * r, r)),
    }
}

/// Renders a `[3, S, S]` image with values in `[0, 1]`.
pub fn render(spec: &SampleSpec, cfg: &RenderConfig) -> Tensor<f32> {
    let s = cfg.size;
    let mut data = vec![0.0f32; 3 * s * s];
    let r = 0.3 * s as f32;
    let cx = s as f32 * 0.5 + spec.jitter.0;
    let cy = s as f32 * 0.5 + spec.jitter.1;
    let rgb = spec.color.rgb();
    let mut rng = substream(spec.noise_seed, "noise", 0);
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).expect("noise sigma");
    for y in 0..s {
        for x in 0..s {
            let d = signed_distance(spec.shape, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r);
            let cov = if spec.group == 0 {
                (0.5 - d).clamp(0.0, 1.0)
            } else {
                (1.5 - d.abs()).clamp(0.0, 1.0)
            };
            for ch in 0..3 {
                let mut v = BACKGROUND * (1.0 - cov) + rgb[ch] * cov;
                if cfg.noise > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data[(ch * s + y) * s + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, s, s], data).expect("image shape")
}

/// Unpadded caption tokens; depends on the class only.
pub fn caption(spec: &SampleSpec, vocab: &Vocabulary) -> Vec<usize> {
    vocab.encode(&prompt_text(spec.class())).expect("template words are in the vocabulary")
}

/// Images, captions and labels for a list of specs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub captions: TextBatch,
    pub labels: Vec<usize>,
    pub groups: Vec<usize>,
    pub specs: Vec<SampleSpec>,
}

impl Batch {
    pub fn from_specs(specs: Vec<SampleSpec>, render_cfg: &RenderConfig, context: usize) -> Result<Self> {
        let vocab = Vocabulary::default();
        let s = render_cfg.size;
        let mut pixels = Vec::with_capacity(specs.len() * 3 * s * s);
        let mut rows = Vec::with_capacity(specs.len());
        for spec in &specs {
            pixels.extend_from_slice(render(spec, render_cfg).data());
            rows.push(caption(spec, &vocab));
        }
        let images = Tensor::new(vec![specs.len(), 3, s, s], pixels)?;
        let captions = TextBatch::from_rows(&rows, context, Vocabulary::EOT, Vocabulary::PAD)?;
        Ok(Batch {
            images,
            captions,
            labels: specs.iter().map(|s| s.class()).collect(),
            groups: specs.iter().map(|s| s.group).collect(),
            specs,
        })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Truncated SHA-256 over image bits and caption tokens.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &t in self.captions.tokens() {
            h.update((t as u32).to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Class sequence for one training batch: consecutive shuffled rounds of all
/// classes, truncated to `b`.
fn balanced_classes(seed: u64, step: u64, b: usize) -> Vec<usize> {
    let mut rng = substream(seed, "data.order", step);
    let mut out = Vec::with_capacity(b);
    while out.len() < b {
        let mut round: Vec<usize> = (0..NUM_CLASSES).collect();
        round.shuffle(&mut rng);
        out.extend(round.into_iter().take(b - out.len()));
    }
    out
}

/// Training batch `step` of the stream defined by `seed`.
pub fn sample_batch(seed: u64, step: u64, b: usize, render_cfg: &RenderConfig, context: usize) -> Result<Batch> {
    if b < 2 {
        return Err(Error::invalid(format!("batch size {b} < 2")));
    }
    let classes = balanced_classes(seed, step, b);
    let specs = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| SampleSpec::draw(seed, "data.train", step.wrapping_mul(1 << 20) + i as u64, c))
        .collect();
    Batch::from_specs(specs, render_cfg, context)
}

/// Held-out samples, disjoint from the training stream; class `i mod 16`.
pub fn eval_specs(seed: u64, stream: &str, n: usize) -> Vec<SampleSpec> {
    (0..n)
        .map(|i| SampleSpec::draw(seed, stream, i as u64, i % NUM_CLASSES))
        .collect()
}

/// Deterministic 80/20 split by hashed sample id; `true` means train.
pub fn in_train_split(seed: u64, id: u64) -> bool {
    stream_key(seed, "split", id) % 5 != 0
}

/// Writes raw little-endian f32 images and a tab-separated manifest.
pub fn dump(dir: &Path, specs: &[SampleSpec], render_cfg: &RenderConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let vocab = Vocabulary::default();
    let mut manifest = String::from("id\tclass\tgroup\tcaption\tfile\n");
    for spec in specs {
        let img = render(spec, render_cfg);
        let file = format!("sample_{:08}.f32", spec.id);
        let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(&file), bytes)?;
        let text = vocab.decode(&caption(spec, &vocab));
        let _ = writeln!(manifest, "{}\t{}\t{}\t{}\t{}", spec.id, spec.class(), spec.group, text, file);
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(shape: Shape, color: Color) -> SampleSpec {
        SampleSpec {
            id: 3,
            shape,
            color,
            jitter: (1.0, -2.0),
            noise_seed: 99,
            group: 0,
        }
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let s = spec(Shape::Triangle, Color::Green);
        let a = render(&s, &RenderConfig::default());
        let b = render(&s, &RenderConfig::default());
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn colour_change_only_touches_the_mask() {
        let cfg = RenderConfig::default();
        let red = render(&spec(Shape::Circle, Color::Red), &cfg);
        let blue = render(&spec(Shape::Circle, Color::Blue), &cfg);
        let clean = render(&spec(Shape::Circle, Color::Red), &RenderConfig { noise: 0.0, ..cfg });
        let plane = 32 * 32;
        let mut touched = 0;
        for p in 0..plane {
            let covered = (0..3).any(|c| clean.data()[c * plane + p] != BACKGROUND);
            for c in 0..3 {
                let differs = red.data()[c * plane + p] != blue.data()[c * plane + p];
                assert!(!differs || covered, "pixel {p} changed outside the mask");
                touched += differs as usize;
            }
        }
        assert!(touched > 50);
    }

    #[test]
    fn noiseless_background_is_exact() {
        let cfg = RenderConfig { noise: 0.0, ..Default::default() };
        for shape in SHAPES {
            let img = render(&spec(shape, Color::Yellow), &cfg);
            assert_eq!(img.data()[0], BACKGROUND);
            let bg = img.data().iter().filter(|&&v| v == BACKGROUND).count();
            assert!(bg > 3 * 32 * 32 / 2);
        }
    }

    #[test]
    fn outline_and_filled_differ() {
        let cfg = RenderConfig { noise: 0.0, ..Default::default() };
        let mut s = spec(Shape::Square, Color::Red);
        let filled = render(&s, &cfg);
        s.group = 1;
        let thin = render(&s, &cfg);
        let cov = |t: &Tensor<f32>| t.data().iter().filter(|&&v| v != BACKGROUND).count();
        assert!(cov(&thin) < cov(&filled));
        // the centre of an outline is background
        assert_eq!(thin.data()[(16 - 2) * 32 + 16 + 1], BACKGROUND);
    }

    #[test]
    fn red_circle_caption() {
        let v = Vocabulary::default();
        let ids = caption(&spec(Shape::Circle, Color::Red), &v);
        let expect: Vec<usize> = [1usize]
            .into_iter()
            .chain(["a", "photo", "of", "a", "red", "circle"].iter().map(|w| v.id(w).unwrap()))
            .chain([2])
            .collect();
        assert_eq!(ids, expect);
        assert_eq!(v.decode(&ids), "a photo of a red circle");
    }

    #[test]
    fn captions_identify_classes() {
        let v = Vocabulary::default();
        let mut all: Vec<Vec<usize>> = (0..NUM_CLASSES)
            .map(|c| {
                let (s, col) = class_parts(c);
                caption(&spec(s, col), &v)
            })
            .collect();
        let mut other = spec(Shape::Cross, Color::Blue);
        other.jitter = (0.0, 0.0);
        other.group = 1;
        assert_eq!(caption(&other, &v), all[class_of(Shape::Cross, Color::Blue)]);
        all.sort();
        all.dedup();
        assert_eq!(all.len(), NUM_CLASSES);
        assert!(v.encode("a photo of a purple dog").is_err());
    }

    #[test]
    fn batches_are_balanced_and_repeatable() {
        let cfg = RenderConfig::default();
        let b16 = sample_batch(5, 2, 16, &cfg, 16).unwrap();
        let mut l = b16.labels.clone();
        l.sort();
        assert_eq!(l, (0..16).collect::<Vec<_>>());
        let b64 = sample_batch(5, 2, 64, &cfg, 16).unwrap();
        let mut counts = [0; NUM_CLASSES];
        b64.labels.iter().for_each(|&c| counts[c] += 1);
        assert!(counts.iter().all(|&n| n == 4));
        assert_eq!(b64.hash(), sample_batch(5, 2, 64, &cfg, 16).unwrap().hash());
        assert_ne!(b64.hash(), sample_batch(5, 3, 64, &cfg, 16).unwrap().hash());
        assert!(sample_batch(5, 0, 1, &cfg, 16).is_err());
    }

    #[test]
    fn split_is_roughly_eighty_twenty() {
        let train = (0..5000).filter(|&i| in_train_split(3, i)).count();
        assert!((3800..4200).contains(&train));
    }

    #[test]
    fn dump_writes_manifest() {
        let dir = tempfile::tempdir().unwrap();
        dump(dir.path(), &eval_specs(1, "data.eval", 3), &RenderConfig::default()).unwrap();
        let m = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(m.lines().count(), 4);
        let raw = std::fs::read(dir.path().join("sample_00000000.f32")).unwrap();
        assert_eq!(raw.len(), 3 * 32 * 32 * 4);
    }
}
