//! Paired-seed ablations and the full finite-difference gradient suite.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::TrainConfig;
use crate::data::{sample_batch, Vocabulary, NUM_CLASSES};
use crate::error::Result;
use crate::eval::{evaluate, held_out_set, EvalReport};
use crate::model::{Model, ModelMode};
use crate::nn::Bound;
use crate::rng::substream;
use crate::tensor::gradcheck::{grad_check_report, op_suite};
use crate::tensor::{Graph, Mode, Tensor, TensorError, Var};
use crate::text_encoder::TextBatch;
use crate::train::{run_training, TrainOutcome};

/// One trained-and-evaluated cell of an ablation sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: ModelMode,
    pub batch_size: usize,
    pub seed: u64,
    pub zeroshot_acc: f64,
    pub mean_recall: f64,
    pub worst_group: f64,
}

impl AblationRow {
    pub fn from_report(cfg: &TrainConfig, report: &EvalReport) -> Self {
        let get = |k: &str| report.get(k).unwrap_or(f64::NAN);
        AblationRow {
            mode: cfg.model.mode,
            batch_size: cfg.batch_size,
            seed: cfg.seed,
            zeroshot_acc: get("zeroshot_acc"),
            mean_recall: get("mean_recall"),
            worst_group: get("worst_group"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationPlan {
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub batch_sizes: Vec<usize>,
    pub modes: Vec<ModelMode>,
    pub eval_samples: usize,
}

impl AblationPlan {
    pub fn new(base: TrainConfig, seeds: usize) -> Self {
        AblationPlan {
            base,
            seeds: (0..seeds as u64).collect(),
            batch_sizes: vec![16, 64],
            modes: vec![ModelMode::Baseline, ModelMode::HyperClip],
            eval_samples: 512,
        }
    }

    /// Every cell's config, grouped by batch size, then seed, then mode.
    pub fn configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &b in &self.batch_sizes {
            for &seed in &self.seeds {
                for &mode in &self.modes {
                    let mut cfg = self.base.clone();
                    cfg.batch_size = b;
                    cfg.seed = seed;
                    cfg.model.mode = mode;
                    out.push(cfg);
                }
            }
        }
        out
    }
}

/// Trains and evaluates one cell on the held-out set of its seed.
pub fn train_and_evaluate(cfg: &TrainConfig, eval_samples: usize) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = run_training(cfg, None)?;
    let set = held_out_set(cfg.seed, eval_samples, &cfg.render(), cfg.model.text.context)?;
    let report = evaluate(&outcome.state.model, &set, NUM_CLASSES)?;
    Ok((outcome, report))
}

/// Runs the sweep; `on_cell` sees each finished cell (for checkpointing or
/// progress output).
pub fn run_ablation<F>(plan: &AblationPlan, mut on_cell: F) -> Result<Vec<AblationRow>>
where
    F: FnMut(&TrainConfig, &TrainOutcome, &EvalReport) -> Result<()>,
{
    let mut rows = Vec::new();
    for cfg in plan.configs() {
        let (outcome, report) = train_and_evaluate(&cfg, plan.eval_samples)?;
        on_cell(&cfg, &outcome, &report)?;
        rows.push(AblationRow::from_report(&cfg, &report));
    }
    Ok(rows)
}

/// Tab-separated table per batch size, each preceded by `# batch_size=N`.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut sizes: Vec<usize> = rows.iter().map(|r| r.batch_size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut s = String::new();
    for b in sizes {
        let _ = writeln!(s, "# batch_size={b}");
        let _ = writeln!(s, "mode\tseed\tzeroshot_acc\tmean_recall\tworst_group");
        for r in rows.iter().filter(|r| r.batch_size == b) {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                r.mode, r.seed, r.zeroshot_acc, r.mean_recall, r.worst_group
            );
        }
        for summary in paired_summaries(rows, b) {
            let _ = writeln!(s, "{summary}");
        }
    }
    s
}

/// Comparison of one mode against the baseline over shared seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSummary {
    pub mode: ModelMode,
    pub batch_size: usize,
    pub pairs: usize,
    pub mean: f64,
    pub baseline_mean: f64,
    pub wins_or_ties: usize,
}

impl PairedSummary {
    pub fn mean_gap(&self) -> f64 {
        self.mean - self.baseline_mean
    }
}

impl std::fmt::Display for PairedSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "# {} vs baseline: mean {:.4} vs {:.4} (gap {:+.4}), wins or ties {}/{}",
            self.mode,
            self.mean,
            self.baseline_mean,
            self.mean_gap(),
            self.wins_or_ties,
            self.pairs
        )
    }
}

/// Zero-shot accuracy of every non-baseline mode paired with the baseline
/// row of the same seed.
pub fn paired_summaries(rows: &[AblationRow], batch_size: usize) -> Vec<PairedSummary> {
    let at_b: Vec<&AblationRow> = rows.iter().filter(|r| r.batch_size == batch_size).collect();
    let mut modes: Vec<ModelMode> = at_b.iter().map(|r| r.mode).filter(|&m| m != ModelMode::Baseline).collect();
    modes.dedup();
    modes
        .into_iter()
        .filter_map(|mode| {
            let pairs: Vec<(f64, f64)> = at_b
                .iter()
                .filter(|r| r.mode == mode)
                .filter_map(|r| {
                    at_b.iter()
                        .find(|b| b.mode == ModelMode::Baseline && b.seed == r.seed)
                        .map(|b| (r.zeroshot_acc, b.zeroshot_acc))
                })
                .collect();
            if pairs.is_empty() {
                return None;
            }
            let n = pairs.len() as f64;
            Some(PairedSummary {
                mode,
                batch_size,
                pairs: pairs.len(),
                mean: pairs.iter().map(|p| p.0).sum::<f64>() / n,
                baseline_mean: pairs.iter().map(|p| p.1).sum::<f64>() / n,
                wins_or_ties: pairs.iter().filter(|p| p.0 >= p.1).count(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEntry {
    pub name: String,
    pub max_error: f64,
    /// Parameter holding the worst element, for composite paths.
    pub worst: Option<String>,
    /// Check points sampled before one with resolvable gradients.
    pub attempts: u64,
}

/// Maximum relative error accepted by the suite.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// A small model whose whole forward can be differenced in `f64` quickly.
pub fn tiny_composite_config(mode: ModelMode) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    let m = &mut cfg.model;
    m.mode = mode;
    m.text.context = 8;
    m.text.embed_dim = 8;
    m.text.stack.layers = 1;
    m.text.stack.width = 8;
    m.text.stack.heads = 2;
    m.text.stack.ff = 16;
    m.image.channels = vec![2, 3];
    m.image.strides = vec![1, 2];
    m.image.embed_dim = 8;
    m.image.resolution = 4;
    m.hyper.stack.layers = 1;
    m.hyper.stack.width = 8;
    m.hyper.stack.heads = 2;
    m.hyper.stack.ff = 16;
    m.hyper.stack.dropout = 0.0;
    m.hyper.bottleneck = 4;
    m.loss.eta_raw = 0.0;
    m.loss.zeta = 0.0;
    cfg.batch_size = 3;
    cfg.noise = 0.05;
    cfg
}

/// BOS, random vocabulary words, EOT; lengths vary so padding is exercised.
fn random_captions<R: Rng>(rng: &mut R, n: usize, context: usize) -> Result<TextBatch> {
    let vocab = Vocabulary::default();
    let rows: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let words = (context - 2).saturating_sub(i % 3).max(1);
            let mut row = vec![Vocabulary::BOS];
            row.extend((0..words).map(|_| rng.random_range(Vocabulary::EOT + 1..vocab.len())));
            row.push(Vocabulary::EOT);
            row
        })
        .collect();
    TextBatch::from_rows(&rows, context, Vocabulary::EOT, Vocabulary::PAD)
}

/// Matrices get fresh `N(0, 1/fan_in)` entries; vectors keep their initial
/// values plus `N(0, 0.1²)` jitter.
fn generic_point<R: Rng>(t: &Tensor<f32>, rng: &mut R) -> Tensor<f64> {
    let s = t.shape();
    let mut out: Tensor<f64> = t.cast();
    let (fresh, std) = match s.len() {
        0 | 1 => (false, 0.1),
        2 => (true, 1.0 / (s[0] as f64).sqrt()),
        _ => (true, 1.0 / (s[1..].iter().product::<usize>() as f64).sqrt()),
    };
    let d = Normal::new(0.0, std).expect("positive std");
    for v in out.data_mut() {
        let r = d.sample(rng);
        *v = if fresh { r } else { *v + r };
    }
    out
}

/// Differences the loss of a full training forward (captions through the
/// text encoder, hypernet, injected norms, image encoder, pairwise loss)
/// with respect to every parameter tensor.
///
/// The initial point has nearly uniform attention and many gradients below
/// the finite-difference noise floor, so the check runs at a seeded
/// unit-scale point, resampled until no nonzero gradient is unresolvably
/// small.
pub fn composite_grad_check(cfg: &TrainConfig, seed: u64) -> Result<GradientEntry> {
    let model = Model::new(cfg.model.clone(), seed)?;
    let batch = sample_batch(seed, 0, cfg.batch_size, &cfg.render(), cfg.model.text.context)?;
    let images: Tensor<f64> = batch.images.cast();
    let names: Vec<String> = model.params.names().map(|s| s.to_string()).collect();
    let loss = |g: &mut Graph<f64>, vars: &[Var], captions: &TextBatch| {
        let mut p = Bound::new();
        for (n, &v) in names.iter().zip(vars) {
            p.insert(n.clone(), v);
        }
        let x = g.constant(images.clone());
        let mut rng = substream(seed, "dropout", 0);
        model
            .forward(g, &p, x, captions, Mode::Train, &mut rng)
            .map(|f| f.loss)
            .map_err(|e| TensorError::invalid("composite", e.to_string()))
    };
    let mut attempt = 0;
    let (captions, inputs) = loop {
        let mut rng = substream(seed, "gradcheck", attempt);
        // corpus captions share most tokens, which leaves the hypernet's set
        // attention with second-order gradients; random word strings do not
        let captions = random_captions(&mut rng, cfg.batch_size, cfg.model.text.context)?;
        let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| generic_point(t, &mut rng)).collect();
        attempt += 1;
        if attempt == MAX_POINT_ATTEMPTS || resolvable(&inputs, |g, v| loss(g, v, &captions))? {
            break (captions, inputs);
        }
    };
    let op = |g: &mut Graph<f64>, vars: &[Var]| loss(g, vars, &captions);
    let report = grad_check_report(op, &inputs, seed);
    Ok(GradientEntry {
        name: format!("composite.{}.{}", cfg.model.mode, cfg.model.image.norm_stats.as_str()),
        max_error: report.max_error,
        worst: report.worst.map(|(i, e)| format!("{}[{e}]", names[i])),
        attempts: attempt,
    })
}

/// Smallest nonzero gradient magnitude central differences at the standard
/// step resolve to the suite tolerance for an O(1) loss.
const RESOLVABLE_GRAD: f64 = 3e-7;
const MAX_POINT_ATTEMPTS: u64 = 64;

/// True when every analytic gradient element is either exactly zero or
/// above [`RESOLVABLE_GRAD`]. Uses only the analytic side.
fn resolvable<F>(inputs: &[Tensor<f64>], f: F) -> Result<bool>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> std::result::Result<Var, TensorError>,
{
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let l = f(&mut g, &vars)?;
    g.backward(l)?;
    Ok(vars
        .iter()
        .all(|&v| g.grad_tensor(v).data().iter().all(|&d| d == 0.0 || d.abs() >= RESOLVABLE_GRAD)))
}

/// Every op case plus composite paths for each mode and both
/// normalization-statistics settings.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradientEntry>> {
    let mut out: Vec<GradientEntry> = op_suite(seed)
        .into_iter()
        .map(|(name, max_error)| GradientEntry {
            name: name.to_string(),
            max_error,
            worst: None,
            attempts: 1,
        })
        .collect();
    for mode in ModelMode::ALL {
        for stats in [crate::image_encoder::NormStats::Running, crate::image_encoder::NormStats::Batch] {
            let mut cfg = tiny_composite_config(mode);
            cfg.model.image.norm_stats = stats;
            out.push(composite_grad_check(&cfg, seed)?);
        }
    }
    Ok(out)
}
