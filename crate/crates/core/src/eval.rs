//! Zero-shot derivation and the evaluation protocols: top-1 and worst-group
//! accuracy, retrieval recall, linear probing and the norm fine-tuning upper
//! bound.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::{class_name, eval_specs, in_train_split, prompt_text, Batch, RenderConfig, Vocabulary, NUM_GROUPS};
use crate::error::{Error, Result};
use crate::image_encoder::{argmax_rows, export_classifier, scores, DeployedClassifier, NormParamSet, OWNED_NORMS};
use crate::model::{Model, ModelMode};
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::substream;
use crate::tensor::{Graph, Mode, Tensor};
use crate::text_encoder::TextBatch;

/// Class labels with one or more prompts each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    labels: Vec<String>,
    prompts: Vec<Vec<String>>,
}

impl PromptSet {
    pub fn new(labels: Vec<String>, prompts: Vec<Vec<String>>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::invalid("a prompt set needs at least two classes"));
        }
        if labels.len() != prompts.len() || prompts.iter().any(Vec::is_empty) {
            return Err(Error::invalid("every class needs at least one prompt"));
        }
        Ok(PromptSet { labels, prompts })
    }

    /// One templated prompt per synthetic class.
    pub fn synthetic(classes: &[usize]) -> Result<Self> {
        Self::new(
            classes.iter().map(|&c| class_name(c)).collect(),
            classes.iter().map(|&c| vec![prompt_text(c)]).collect(),
        )
    }

    /// `label<TAB>prompt` lines; repeated labels add prompts to that class.
    pub fn parse(text: &str) -> Result<Self> {
        let mut labels: Vec<String> = Vec::new();
        let mut prompts: Vec<Vec<String>> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, prompt) = line
                .split_once('\t')
                .ok_or_else(|| Error::invalid(format!("prompt line {} lacks a tab separator", n + 1)))?;
            match labels.iter().position(|l| l == label) {
                Some(i) => prompts[i].push(prompt.trim().to_string()),
                None => {
                    labels.push(label.to_string());
                    prompts.push(vec![prompt.trim().to_string()]);
                }
            }
        }
        Self::new(labels, prompts)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (l, ps) in self.labels.iter().zip(&self.prompts) {
            for p in ps {
                let _ = writeln!(s, "{l}\t{p}");
            }
        }
        s
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn prompts(&self) -> &[Vec<String>] {
        &self.prompts
    }

    /// Tokenizes every prompt; returns the batch and each row's class.
    pub fn tokenize(&self, vocab: &Vocabulary, context: usize) -> Result<(TextBatch, Vec<usize>)> {
        let mut rows = Vec::new();
        let mut owner = Vec::new();
        for (c, ps) in self.prompts.iter().enumerate() {
            for p in ps {
                rows.push(vocab.encode(p)?);
                owner.push(c);
            }
        }
        let batch = TextBatch::from_rows(&rows, context, Vocabulary::EOT, Vocabulary::PAD)?;
        Ok((batch, owner))
    }
}

/// `[K, D]` class embeddings from one text-encoder pass. Classes with several
/// prompts average their unit embeddings and renormalize.
pub fn class_embeddings(model: &Model, prompts: &PromptSet) -> Result<Tensor<f32>> {
    let (batch, owner) = prompts.tokenize(&Vocabulary::default(), model.cfg.text.context)?;
    let y = model.embed_text(&batch)?;
    let d = y.shape()[1];
    let k = prompts.len();
    let mut out = vec![0.0f32; k * d];
    for c in 0..k {
        let rows: Vec<usize> = (0..owner.len()).filter(|&r| owner[r] == c).collect();
        if let [r] = rows.as_slice() {
            out[c * d..(c + 1) * d].copy_from_slice(y.row(*r));
            continue;
        }
        let mut acc = vec![0.0f64; d];
        for &r in &rows {
            acc.iter_mut().zip(y.row(r)).for_each(|(a, &v)| *a += v as f64);
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        out[c * d..(c + 1) * d].iter_mut().zip(&acc).for_each(|(o, a)| *o = (a / n) as f32);
    }
    Ok(Tensor::new(vec![k, d], out)?)
}

/// Builds the deployable classifier: class embeddings from one text pass,
/// norms from one hypernet pass (or the owned vector), then export.
pub fn derive_zero_shot(model: &Model, prompts: &PromptSet) -> Result<DeployedClassifier> {
    let y = class_embeddings(model, prompts)?;
    let norms = model.norms_for(&y)?;
    export_classifier(
        &model.image,
        &model.fixed_image_params(),
        &norms,
        &model.stats,
        &y,
        prompts.labels().to_vec(),
    )
}

pub fn classify(classifier: &DeployedClassifier, images: &Tensor<f32>) -> Result<Vec<usize>> {
    classifier.classify(images)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64
}

/// Within-group top-1 accuracy for groups `0..n_groups`.
pub fn group_accuracies(pred: &[usize], labels: &[usize], groups: &[usize], n_groups: usize) -> Result<Vec<f64>> {
    if pred.len() != labels.len() || pred.len() != groups.len() {
        return Err(Error::invalid("predictions, labels and groups differ in length"));
    }
    let mut hit = vec![0usize; n_groups];
    let mut tot = vec![0usize; n_groups];
    for ((p, l), &g) in pred.iter().zip(labels).zip(groups) {
        if g >= n_groups {
            return Err(Error::invalid(format!("group id {g} >= group count {n_groups}")));
        }
        tot[g] += 1;
        hit[g] += (p == l) as usize;
    }
    if let Some(g) = tot.iter().position(|&t| t == 0) {
        return Err(Error::invalid(format!("group {g} has no samples")));
    }
    Ok(hit.iter().zip(&tot).map(|(&h, &t)| h as f64 / t as f64).collect())
}

/// Minimum within-group accuracy.
pub fn worst_group_accuracy(pred: &[usize], labels: &[usize], groups: &[usize], n_groups: usize) -> Result<f64> {
    let acc = group_accuracies(pred, labels, groups, n_groups)?;
    Ok(acc.into_iter().fold(f64::INFINITY, f64::min))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    /// Captions whose top-1 image is a correct one.
    pub image_recall: f64,
    /// Images whose top-1 caption is a correct one.
    pub text_recall: f64,
    pub mean_recall: f64,
}

/// Recall@1 both ways for `sim: [captions, images]`; `truth[c]` lists the
/// correct images of caption `c`.
pub fn retrieval_metrics(sim: &Tensor<f32>, truth: &[Vec<usize>]) -> Result<Retrieval> {
    let s = sim.shape();
    if s.len() != 2 || s[0] != truth.len() || s[0] == 0 || s[1] == 0 {
        return Err(Error::invalid("similarity matrix does not match the ground truth"));
    }
    let (nc, ni) = (s[0], s[1]);
    let mut correct = vec![false; nc * ni];
    for (c, imgs) in truth.iter().enumerate() {
        if imgs.is_empty() {
            return Err(Error::invalid(format!("caption {c} has no correct image")));
        }
        for &i in imgs {
            if i >= ni {
                return Err(Error::invalid(format!("caption {c} points at image {i} >= {ni}")));
            }
            correct[c * ni + i] = true;
        }
    }
    if let Some(i) = (0..ni).find(|&i| (0..nc).all(|c| !correct[c * ni + i])) {
        return Err(Error::invalid(format!("image {i} has no correct caption")));
    }
    let d = sim.data();
    let best_image = argmax_rows(d, ni);
    let image_hits = best_image.iter().enumerate().filter(|&(c, &i)| correct[c * ni + i]).count();
    let mut text_hits = 0;
    for i in 0..ni {
        let mut best = 0;
        for c in 1..nc {
            if d[c * ni + i] > d[best * ni + i] {
                best = c;
            }
        }
        text_hits += correct[best * ni + i] as usize;
    }
    let image_recall = image_hits as f64 / nc as f64;
    let text_recall = text_hits as f64 / ni as f64;
    Ok(Retrieval {
        image_recall,
        text_recall,
        mean_recall: 0.5 * (image_recall + text_recall),
    })
}

/// Metric map plus per-class and per-group breakdowns.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub per_class: Vec<f64>,
    pub per_group: Vec<f64>,
    pub samples: usize,
}

impl EvalReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    /// `name<TAB>value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.metrics {
            let _ = writeln!(s, "{k}\t{v}");
        }
        for (i, v) in self.per_class.iter().enumerate() {
            let _ = writeln!(s, "class.{i}.accuracy\t{v}");
        }
        for (i, v) in self.per_group.iter().enumerate() {
            let _ = writeln!(s, "group.{i}.accuracy\t{v}");
        }
        let _ = writeln!(s, "samples\t{}", self.samples);
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = EvalReport::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("report line `{line}` lacks a tab")))?;
            let val: f64 = v.parse().map_err(|_| Error::Format(format!("bad value in `{line}`")))?;
            let idx = |p: &str| k.strip_prefix(p).and_then(|x| x.strip_suffix(".accuracy")).and_then(|x| x.parse::<usize>().ok());
            if k == "samples" {
                r.samples = val as usize;
            } else if let Some(i) = idx("class.") {
                r.per_class.resize(r.per_class.len().max(i + 1), 0.0);
                r.per_class[i] = val;
            } else if let Some(i) = idx("group.") {
                r.per_group.resize(r.per_group.len().max(i + 1), 0.0);
                r.per_group[i] = val;
            } else {
                r.metrics.insert(k.to_string(), val);
            }
        }
        Ok(r)
    }
}

/// Held-out evaluation samples (class `i mod 16`).
pub fn held_out_set(seed: u64, n: usize, render: &RenderConfig, context: usize) -> Result<Batch> {
    Batch::from_specs(eval_specs(seed, "data.eval", n), render, context)
}

/// Labelled probing pool split 80/20 by hashed sample id into (train, test).
pub fn probe_split(seed: u64, n: usize, render: &RenderConfig, context: usize) -> Result<(Batch, Batch)> {
    let (train, test) = eval_specs(seed, "data.probe", n)
        .into_iter()
        .partition(|s| in_train_split(seed, s.id));
    Ok((Batch::from_specs(train, render, context)?, Batch::from_specs(test, render, context)?))
}

/// Zero-shot accuracy, worst-group accuracy and caption/image retrieval on a
/// held-out set over all synthetic classes.
pub fn evaluate(model: &Model, set: &Batch, classes: usize) -> Result<EvalReport> {
    let prompts = PromptSet::synthetic(&(0..classes).collect::<Vec<_>>())?;
    let clf = derive_zero_shot(model, &prompts)?;
    let pred = clf.classify(&set.images)?;
    let mut report = EvalReport {
        samples: set.len(),
        ..Default::default()
    };
    let acc = accuracy(&pred, &set.labels);
    report.per_group = group_accuracies(&pred, &set.labels, &set.groups, NUM_GROUPS)?;
    report.per_class = (0..classes)
        .map(|c| {
            let idx: Vec<usize> = (0..pred.len()).filter(|&i| set.labels[i] == c).collect();
            idx.iter().filter(|&&i| pred[i] == c).count() as f64 / idx.len().max(1) as f64
        })
        .collect();
    report.metrics.insert("zeroshot_acc".into(), acc);
    report.metrics.insert("worst_group".into(), report.per_group.iter().copied().fold(f64::INFINITY, f64::min));

    // retrieval: captions condition the hypernet, class-level ground truth
    let y = model.embed_text(&set.captions)?;
    let norms = model.norms_for(&y)?;
    let x = model.embed_images(&norms, &set.images)?;
    let sim = scores(&y, &x)?;
    let truth: Vec<Vec<usize>> = set
        .labels
        .iter()
        .map(|&c| (0..set.len()).filter(|&i| set.labels[i] == c).collect())
        .collect();
    let r = retrieval_metrics(&sim, &truth)?;
    report.metrics.insert("image_recall@1".into(), r.image_recall);
    report.metrics.insert("text_recall@1".into(), r.text_recall);
    report.metrics.insert("mean_recall".into(), r.mean_recall);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: 1e-4,
            weight_decay: 0.1,
            batch_size: 64,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub head: Tensor<f32>,
    pub norms: NormParamSet,
    pub accuracy: f64,
    pub zero_shot_accuracy: f64,
}

/// Trains only the `[K, D]` head (initialized from the class embeddings) on
/// frozen image features.
pub fn linear_probe(model: &Model, prompts: &PromptSet, train: &Batch, test: &Batch, cfg: &ProbeConfig) -> Result<ProbeResult> {
    fit_head(model, prompts, train, test, cfg, false)
}

/// Fine-tunes the owned norm vector together with the head. With
/// `freeze_norms` this reduces exactly to [`linear_probe`].
pub fn norm_finetune_upper_bound(
    model: &Model,
    prompts: &PromptSet,
    train: &Batch,
    test: &Batch,
    cfg: &ProbeConfig,
    freeze_norms: bool,
) -> Result<ProbeResult> {
    if model.mode() != ModelMode::Baseline {
        return Err(Error::ModeMismatch {
            expected: ModelMode::Baseline.to_string(),
            found: model.mode().to_string(),
        });
    }
    fit_head(model, prompts, train, test, cfg, !freeze_norms)
}

fn fit_head(
    model: &Model,
    prompts: &PromptSet,
    train: &Batch,
    test: &Batch,
    cfg: &ProbeConfig,
    tune_norms: bool,
) -> Result<ProbeResult> {
    let k = prompts.len();
    if let Some(c) = (0..k).find(|c| !train.labels.contains(c)) {
        return Err(Error::invalid(format!("class {c} is absent from the probe training split")));
    }
    if let Some(&l) = train.labels.iter().chain(&test.labels).find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {l} outside the {k} prompt classes")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("probe.batch_size", "must be positive"));
    }
    let y = class_embeddings(model, prompts)?;
    let init_norms = model.norms_for(&y)?;
    let fixed = model.fixed_image_params();
    let zero_shot = accuracy(&argmax_rows(scores(&model.embed_images(&init_norms, &test.images)?, &y)?.data(), k), &test.labels);

    let mut store = ParamStore::new();
    store.insert("head", y.clone());
    if tune_norms {
        store.insert(OWNED_NORMS, init_norms.to_tensor());
    }
    let cached = if tune_norms { None } else { Some(model.embed_images(&init_norms, &train.images)?) };
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let n = train.len();
    let per = train.images.numel() / n.max(1);
    let img_shape = train.images.shape().to_vec();
    let d = y.shape()[1];
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, "probe.order", epoch as u64));
        for idx in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let mut g = Graph::<f32>::new();
            let p = store.bind(&mut g, |_| true);
            let x = match &cached {
                Some(feat) => {
                    let rows = idx.iter().flat_map(|&i| feat.row(i).iter().copied()).collect();
                    g.constant(Tensor::new(vec![idx.len(), d], rows)?)
                }
                None => {
                    let fb = fixed.bind(&mut g, |_| false);
                    let pix = idx.iter().flat_map(|&i| train.images.data()[i * per..(i + 1) * per].iter().copied()).collect();
                    let mut s = img_shape.clone();
                    s[0] = idx.len();
                    let imgs = g.constant(Tensor::new(s, pix)?);
                    let nv = p.get(OWNED_NORMS)?;
                    model.image.forward(&mut g, &fb, imgs, nv, &model.stats, Mode::Eval)?.embeddings
                }
            };
            let head = p.get("head")?;
            let ht = g.transpose(head)?;
            let logits = g.matmul(x, ht)?;
            let loss = g.cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            let grads = p.iter().map(|(nme, &v)| (nme.clone(), g.grad_tensor(v))).collect();
            opt.step(&mut store, &grads)?;
        }
    }
    let head = store.require("head")?.clone();
    let norms = match store.get(OWNED_NORMS) {
        Some(t) => NormParamSet::new(t.data().to_vec(), init_norms.layout().clone())?,
        None => init_norms,
    };
    let test_x = model.embed_images(&norms, &test.images)?;
    let pred = argmax_rows(scores(&test_x, &head)?.data(), k);
    Ok(ProbeResult {
        head,
        norms,
        accuracy: accuracy(&pred, &test.labels),
        zero_shot_accuracy: zero_shot,
    })
}
