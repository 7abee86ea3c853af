use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hyperclip::config::TrainConfig;
use hyperclip::data::NUM_CLASSES;
use hyperclip::eval::{
    derive_zero_shot, evaluate, held_out_set, linear_probe, norm_finetune_upper_bound, probe_split, ProbeConfig,
    ProbeResult, PromptSet,
};
use hyperclip::experiments::{ablation_table, gradient_suite, AblationPlan, AblationRow, GRAD_TOLERANCE};
use hyperclip::model::{Model, ModelMode};
use hyperclip::persist::{load_checkpoint, save_classifier, Checkpoint};
use hyperclip::runs::{add_report, output_root, run_id, train_run, RunLock, RunManifest, RunOptions, CHECKPOINT_FILE};
use hyperclip::{Error, Result};

#[derive(Parser)]
#[command(name = "hyperclip", version, about = "Hypernetwork-conditioned sigmoid contrastive training on a synthetic shapes corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model into a run directory.
    Train(TrainArgs),
    /// Zero-shot accuracy, worst-group accuracy and retrieval on held-out samples.
    Eval(EvalArgs),
    /// Export a deployable classifier for a prompt set.
    Derive(DeriveArgs),
    /// Linear probe on frozen features.
    Probe(ProbeArgs),
    /// Probe that also fine-tunes the norm parameters (baseline checkpoints).
    Upperbound(UpperboundArgs),
    /// Paired-seed comparison against the baseline across batch sizes.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and the composite model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Run directory (default: $HYPERCLIP_OUT/<run id>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 500)]
    checkpoint_every: u64,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Refuse checkpoints written in another mode.
    #[arg(long)]
    mode: Option<String>,
    /// Output directory (default: the checkpoint's directory).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for the evaluation samples (default: the training seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[arg(long, default_value_t = 512)]
    samples: usize,
}

#[derive(Args)]
struct DeriveArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    /// `label<TAB>prompt` lines (default: the 16 synthetic classes).
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Classifier file (default: <out>/classifier.bin).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    ck: CheckpointArgs,
    #[arg(long, default_value_t = 1280)]
    samples: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
}

#[derive(Args)]
struct UpperboundArgs {
    #[command(flatten)]
    probe: ProbeArgs,
    /// Keep the norms fixed (reduces to the linear probe).
    #[arg(long)]
    freeze_norms: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![16, 64])]
    batch_sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["baseline".to_string(), "hyperclip".to_string()])]
    modes: Vec<String>,
    #[arg(long, default_value_t = 512)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reuse finished cells and continue unfinished ones.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<ModelMode> {
    ModelMode::parse(s).ok_or_else(|| Error::Config {
        field: "mode".into(),
        msg: format!("unknown mode `{s}` (hyperclip, baseline, hyperclip_transformerless)"),
    })
}

fn build_config(a: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(p) = &a.config {
        cfg.apply_text(&fs::read_to_string(p)?)?;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            field: kv.clone(),
            msg: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(m) = &a.mode {
        cfg.set("mode", m)?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: &TrainArgs) -> Result<()> {
    let cfg = build_config(&a.cfg)?;
    let dir = a.out.clone().unwrap_or_else(|| output_root().join(run_id(&cfg)));
    let run = train_run(
        &cfg,
        &dir,
        RunOptions {
            resume: a.resume,
            checkpoint_every: a.checkpoint_every,
        },
    )?;
    let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    println!("run\t{}", dir.display());
    println!("step\t{}", run.state.step);
    if let Some(from) = run.resumed_from {
        println!("resumed_from\t{from}");
    }
    if let Some(c) = &run.calibration {
        println!("weight_scale\t{}", c.weight_scale);
        println!("calibration_ratio\t{}", c.fresh_ratio);
    }
    println!("checkpoint_digest\t{}", ck.digest());
    Ok(())
}

/// Loads the checkpoint and locks the output directory, reusing its
/// manifest when one exists.
struct Session {
    dir: PathBuf,
    cfg: TrainConfig,
    model: Model,
    seed: u64,
    manifest: RunManifest,
    _lock: RunLock,
}

fn open_session(a: &CheckpointArgs, command: &str) -> Result<Session> {
    let mode = a.mode.as_deref().map(parse_mode).transpose()?;
    let ck = load_checkpoint(&a.checkpoint, mode)?;
    let (cfg, state) = ck.to_state()?;
    let dir = match &a.out {
        Some(d) => d.clone(),
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let lock = RunLock::acquire(&dir)?;
    let mut manifest = RunManifest::load(&dir).unwrap_or_else(|_| RunManifest::new(run_id(&cfg), command, cfg.seed));
    let ck_abs = fs::canonicalize(&a.checkpoint)?;
    let ck_rel = ck_abs
        .strip_prefix(fs::canonicalize(&dir)?)
        .map(Path::to_path_buf)
        .unwrap_or(ck_abs.clone());
    if !manifest.checkpoints.contains(&ck_rel) {
        manifest.checkpoints.push(ck_rel);
    }
    Ok(Session {
        dir,
        seed: a.seed.unwrap_or(cfg.seed),
        cfg,
        model: state.model,
        manifest,
        _lock: lock,
    })
}

fn eval(a: &EvalArgs) -> Result<()> {
    let mut s = open_session(&a.ck, "eval")?;
    let set = held_out_set(s.seed, a.samples, &s.cfg.render(), s.cfg.model.text.context)?;
    let report = evaluate(&s.model, &set, NUM_CLASSES)?;
    let text = report.to_text();
    let path = add_report(&s.dir, &mut s.manifest, "eval.tsv", &text)?;
    print!("{text}");
    println!("report\t{}", path.display());
    Ok(())
}

fn derive(a: &DeriveArgs) -> Result<()> {
    let mut s = open_session(&a.ck, "derive")?;
    let prompts = match &a.prompts {
        Some(p) => PromptSet::parse(&fs::read_to_string(p)?)?,
        None => PromptSet::synthetic(&(0..NUM_CLASSES).collect::<Vec<_>>())?,
    };
    s.model.counters.reset();
    let clf = derive_zero_shot(&s.model, &prompts)?;
    let output = a.output.clone().unwrap_or_else(|| s.dir.join("classifier.bin"));
    save_classifier(&clf, &output)?;
    let text = format!(
        "classes\t{}\nencoder_parameters\t{}\nparameters\t{}\ntext_forwards\t{}\nhypernet_forwards\t{}\nclassifier\t{}\n",
        clf.classes(),
        clf.encoder_parameter_count(),
        clf.parameter_count(),
        s.model.counters.text(),
        s.model.counters.hyper(),
        output.display()
    );
    add_report(&s.dir, &mut s.manifest, "derive.tsv", &text)?;
    print!("{text}");
    Ok(())
}

fn probe_common(a: &ProbeArgs, command: &str, run: impl Fn(&Model, &PromptSet, &ProbeArgs, u64, &TrainConfig) -> Result<ProbeResult>) -> Result<()> {
    let mut s = open_session(&a.ck, command)?;
    let prompts = PromptSet::synthetic(&(0..NUM_CLASSES).collect::<Vec<_>>())?;
    let r = run(&s.model, &prompts, a, s.seed, &s.cfg)?;
    let text = format!("accuracy\t{}\nzero_shot_accuracy\t{}\nepochs\t{}\n", r.accuracy, r.zero_shot_accuracy, a.epochs);
    add_report(&s.dir, &mut s.manifest, &format!("{command}.tsv"), &text)?;
    print!("{text}");
    Ok(())
}

fn probe_config(a: &ProbeArgs, seed: u64) -> ProbeConfig {
    ProbeConfig {
        epochs: a.epochs,
        seed,
        ..ProbeConfig::default()
    }
}

fn probe(a: &ProbeArgs) -> Result<()> {
    probe_common(a, "probe", |model, prompts, a, seed, cfg| {
        let (train, test) = probe_split(seed, a.samples, &cfg.render(), cfg.model.text.context)?;
        linear_probe(model, prompts, &train, &test, &probe_config(a, seed))
    })
}

fn upperbound(a: &UpperboundArgs) -> Result<()> {
    let freeze = a.freeze_norms;
    probe_common(&a.probe, "upperbound", move |model, prompts, a, seed, cfg| {
        let (train, test) = probe_split(seed, a.samples, &cfg.render(), cfg.model.text.context)?;
        norm_finetune_upper_bound(model, prompts, &train, &test, &probe_config(a, seed), freeze)
    })
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let base = build_config(&a.cfg)?;
    let mut plan = AblationPlan::new(base.clone(), a.seeds);
    plan.batch_sizes = a.batch_sizes.clone();
    plan.modes = a.modes.iter().map(|m| parse_mode(m)).collect::<Result<_>>()?;
    plan.eval_samples = a.samples;
    let dir = a.out.clone().unwrap_or_else(|| output_root().join(format!("ablate-{}", run_id(&base))));
    fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new(format!("ablate-{}", run_id(&base)), "ablate", base.seed);
    let mut rows: Vec<AblationRow> = Vec::new();
    for cfg in plan.configs() {
        let cell = dir.join(run_id(&cfg));
        let report_path = cell.join("eval.tsv");
        let finished = a.resume
            && report_path.exists()
            && Checkpoint::load(&cell.join(CHECKPOINT_FILE)).is_ok_and(|c| c.step >= cfg.steps);
        let report = if finished {
            hyperclip::eval::EvalReport::parse(&fs::read_to_string(&report_path)?)?
        } else {
            let resume = a.resume && cell.join(CHECKPOINT_FILE).exists();
            let mut run = train_run(
                &cfg,
                &cell,
                RunOptions {
                    resume,
                    ..RunOptions::default()
                },
            )?;
            let set = held_out_set(cfg.seed, plan.eval_samples, &cfg.render(), cfg.model.text.context)?;
            let report = evaluate(&run.state.model, &set, NUM_CLASSES)?;
            let _lock = RunLock::acquire(&cell)?;
            add_report(&cell, &mut run.manifest, "eval.tsv", &report.to_text())?;
            report
        };
        let row = AblationRow::from_report(&cfg, &report);
        eprintln!(
            "{}\tb={}\tseed={}\tzeroshot_acc={:.4}",
            row.mode, row.batch_size, row.seed, row.zeroshot_acc
        );
        manifest.checkpoints.push(PathBuf::from(run_id(&cfg)).join(CHECKPOINT_FILE));
        manifest.reports.push(PathBuf::from(run_id(&cfg)).join("eval.tsv"));
        rows.push(row);
    }
    let table = ablation_table(&rows);
    add_report(&dir, &mut manifest, "ablation.tsv", &table)?;
    print!("{table}");
    Ok(())
}

fn gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let entries = gradient_suite(a.seed)?;
    let mut text = String::new();
    let mut ok = true;
    for e in &entries {
        let pass = e.max_error < GRAD_TOLERANCE;
        ok &= pass;
        text.push_str(&format!(
            "{}\t{:.3e}\t{}{}\n",
            e.name,
            e.max_error,
            if pass { "ok" } else { "FAIL" },
            e.worst.as_ref().map(|w| format!("\t{w}")).unwrap_or_default()
        ));
    }
    let dir = a.out.clone().unwrap_or_else(|| output_root().join(format!("gradcheck-s{}", a.seed)));
    let _lock = RunLock::acquire(&dir)?;
    let mut manifest = RunManifest::new(format!("gradcheck-s{}", a.seed), "gradcheck", a.seed);
    add_report(&dir, &mut manifest, "gradcheck.tsv", &text)?;
    print!("{text}");
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Derive(a) => derive(a).map(|_| true),
        Command::Probe(a) => probe(a).map(|_| true),
        Command::Upperbound(a) => upperbound(a).map(|_| true),
        Command::Ablate(a) => ablate(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
