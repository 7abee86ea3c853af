//! Acceptance gate: one pass/fail line per criterion.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hyperclip::config::TrainConfig;
use hyperclip::data::NUM_CLASSES;
use hyperclip::eval::{
    class_embeddings, derive_zero_shot, held_out_set, linear_probe, norm_finetune_upper_bound, probe_split,
    retrieval_metrics, worst_group_accuracy, ProbeConfig, PromptSet,
};
use hyperclip::experiments::{
    ablation_table, gradient_suite, paired_summaries, run_ablation, AblationPlan, GRAD_TOLERANCE,
};
use hyperclip::image_encoder::{argmax_rows, scores, OWNED_NORMS};
use hyperclip::loss::{siglip_loss, siglip_loss_chunked};
use hyperclip::model::{Model, ModelConfig, ModelMode};
use hyperclip::persist::Checkpoint;
use hyperclip::rng::substream;
use hyperclip::runs::{train_run, RunOptions, CHECKPOINT_FILE, TELEMETRY_FILE};
use hyperclip::tensor::{similarity_peak, similarity_peak_reset, Graph, Tensor};
use hyperclip::train::{run_training, TrainOutcome, COMPONENTS};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

mod common;

type Verdict = Result<(bool, String), String>;

struct Gate {
    failed: usize,
    gating_failed: usize,
}

impl Gate {
    fn check(&mut self, id: usize, name: &str, f: impl FnOnce() -> Verdict) {
        self.run(id, name, true, f)
    }

    /// Empirical comparisons whose outcome is reported but does not set the
    /// exit status.
    fn report(&mut self, id: usize, name: &str, f: impl FnOnce() -> Verdict) {
        self.run(id, name, false, f)
    }

    fn run(&mut self, id: usize, name: &str, gating: bool, f: impl FnOnce() -> Verdict) {
        let t = Instant::now();
        let (ok, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
        if !ok {
            self.failed += 1;
            self.gating_failed += usize::from(gating);
        }
        println!(
            "[{}] {id:>2} {name}: {detail} ({:.1}s){}",
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            if gating { "" } else { " [reported, not gating]" }
        );
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

fn unit_rows(k: usize, d: usize, seed: u64) -> Tensor<f32> {
    let mut rng = substream(seed, "acceptance.rows", k as u64);
    let mut data: Vec<f32> = (0..k * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    for row in data.chunks_mut(d) {
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::new(vec![k, d], data).unwrap()
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let entries = gradient_suite(0).map_err(e)?;
    let took = t.elapsed();
    let worst = entries.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).unwrap();
    let failing: Vec<&str> = entries
        .iter()
        .filter(|x| x.max_error >= GRAD_TOLERANCE)
        .map(|x| x.name.as_str())
        .collect();
    let ok = failing.is_empty() && took < Duration::from_secs(120);
    Ok((
        ok,
        format!(
            "{} checks, worst {:.2e} at {}, {} failing, {:.1}s < 120s",
            entries.len(),
            worst.max_error,
            worst.name,
            failing.len(),
            took.as_secs_f64()
        ),
    ))
}

fn invariance() -> Verdict {
    let t = Instant::now();
    let mut worst_dup = 0.0f32;
    let mut broken = 0;
    let mut checked = 0;
    for mode in [ModelMode::HyperClip, ModelMode::HyperClipTransformerless] {
        let m = Model::new(ModelConfig { mode, ..Default::default() }, 1).map_err(e)?;
        let d = m.cfg.text.embed_dim;
        for k in [1usize, 2, 8, 16, 64] {
            let y = unit_rows(k, d, 0);
            let reference = m.norms_for(&y).map_err(e)?;
            let mut rng = substream(0, "acceptance.perm", k as u64);
            for _ in 0..20 {
                let mut order: Vec<usize> = (0..k).collect();
                order.shuffle(&mut rng);
                let data: Vec<f32> = order.iter().flat_map(|&r| y.row(r).to_vec()).collect();
                let p = m.norms_for(&Tensor::new(vec![k, d], data).unwrap()).map_err(e)?;
                let same = p.flat().iter().zip(reference.flat()).all(|(a, b)| a.to_bits() == b.to_bits());
                broken += usize::from(!same);
                checked += 1;
            }
            let doubled: Vec<f32> = (0..k).flat_map(|r| [y.row(r), y.row(r)].concat()).collect();
            let dup = m.norms_for(&Tensor::new(vec![2 * k, d], doubled).unwrap()).map_err(e)?;
            let diff = dup.flat().iter().zip(reference.flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            worst_dup = worst_dup.max(diff);
        }
    }
    let took = t.elapsed();
    let ok = broken == 0 && worst_dup <= 1e-6 && took < Duration::from_secs(60);
    Ok((
        ok,
        format!("{broken}/{checked} permutations differ bitwise, duplication max |Δ| {worst_dup:.2e} <= 1e-6"),
    ))
}

fn loss_value(x: &[f64], y: &[f64], b: usize, eta_raw: f64, zeta: f64) -> Result<f64, String> {
    let d = x.len() / b;
    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::new(vec![b, d], x.to_vec()).map_err(e)?);
    let yv = g.constant(Tensor::new(vec![b, d], y.to_vec()).map_err(e)?);
    let ev = g.constant(Tensor::scalar(eta_raw));
    let zv = g.constant(Tensor::scalar(zeta));
    let l = siglip_loss(&mut g, xv, yv, ev, zv).map_err(e)?;
    Ok(g.data(l)[0])
}

/// Loss value and gradients for x, y, eta_raw and zeta.
fn loss_with_grads(x: &Tensor<f64>, y: &Tensor<f64>, chunk: Option<usize>) -> Result<(f64, Vec<Vec<f64>>), String> {
    let mut g = Graph::<f64>::new();
    let xv = g.param(x.clone());
    let yv = g.param(y.clone());
    let ev = g.param(Tensor::scalar(10f64.ln()));
    let zv = g.param(Tensor::scalar(-10.0));
    let l = match chunk {
        Some(c) => siglip_loss_chunked(&mut g, xv, yv, ev, zv, c),
        None => siglip_loss(&mut g, xv, yv, ev, zv),
    }
    .map_err(e)?;
    g.backward(l).map_err(e)?;
    let grads = [xv, yv, ev, zv].iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    Ok((g.data(l)[0], grads))
}

fn loss_oracles() -> Verdict {
    let ln2 = loss_value(&[1.0, 0.0], &[0.0, 1.0], 1, 0.0, 0.0)?;
    let ident = loss_value(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, 0.0, 0.0)?;
    let mut ok = (ln2 - std::f64::consts::LN_2).abs() < 1e-5 && (ident - 1.006408).abs() < 1e-5;
    let mut detail = format!("ln2 case {ln2:.6}, identity case {ident:.6}");
    let (b, d) = (64, 16);
    let x = unit_rows(b, d, 1).cast::<f64>();
    let y = unit_rows(b, d, 2).cast::<f64>();
    let (full, full_grads) = loss_with_grads(&x, &y, None)?;
    for chunk in [1usize, 4, 16] {
        similarity_peak_reset();
        let (v, grads) = loss_with_grads(&x, &y, Some(chunk))?;
        let peak = similarity_peak();
        let gd = grads
            .iter()
            .zip(&full_grads)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        let vd = (v - full).abs();
        ok &= vd <= 1e-6 && gd <= 1e-5 && peak <= chunk * chunk && peak > 0;
        detail.push_str(&format!("; b={chunk}: |Δvalue| {vd:.1e}, max |Δgrad| {gd:.1e}, peak {peak} <= {}", chunk * chunk));
    }
    Ok((ok, detail))
}

fn metric_oracles() -> Verdict {
    let mut mismatches = 0;
    for i in 0..100 {
        let c = common::retrieval_case(&mut substream(0, "acceptance.retrieval", i));
        let r = retrieval_metrics(&Tensor::new(vec![10, 10], c.sim.clone()).unwrap(), &c.truth).map_err(e)?;
        let (ir, tr) = common::brute_recall(&c.sim, 10, 10, &c.truth);
        mismatches += usize::from(r.image_recall != ir || r.text_recall != tr || r.mean_recall != 0.5 * (ir + tr));
    }
    let retrieval = mismatches;
    for i in 0..100 {
        let c = common::group_case(&mut substream(0, "acceptance.groups", i));
        let w = worst_group_accuracy(&c.pred, &c.labels, &c.groups, 3).map_err(e)?;
        mismatches += usize::from(w != common::brute_worst_group(&c.pred, &c.labels, &c.groups, 3));
    }
    Ok((
        mismatches == 0,
        format!(
            "retrieval {}/100 exact, worst-group {}/100 exact",
            100 - retrieval,
            100 - (mismatches - retrieval)
        ),
    ))
}

fn calibration() -> Verdict {
    let mut cfg = TrainConfig::default();
    cfg.model.hyper.weight_scale = true;
    cfg.steps = 20;
    cfg.log_every = 5;
    let out = run_training(&cfg, None).map_err(e)?;
    let c = out.calibration.ok_or("no calibration ran")?;
    let steps: Vec<u64> = out.telemetry.iter().map(|r| r.step).collect();
    let logged = steps == [1, 5, 10, 15, 20];
    let active = ["text", "image", "hyper", "eta", "zeta"];
    let norms_ok = out.telemetry.iter().all(|r| {
        r.is_finite()
            && COMPONENTS
                .iter()
                .enumerate()
                .filter(|(_, n)| active.contains(n))
                .all(|(i, _)| r.param_norms[i] > 0.0 && r.update_norms[i] > 0.0)
    });
    let event = out.telemetry[0].event.starts_with("calibration:");
    let ok = (0.5..=2.0).contains(&c.fresh_ratio) && logged && norms_ok && event;
    Ok((
        ok,
        format!(
            "S_w {:.4}, fresh-batch ratio {:.4} in [0.5, 2], logged steps {steps:?}, norms and update norms present: {norms_ok}",
            c.weight_scale, c.fresh_ratio
        ),
    ))
}

fn determinism() -> Verdict {
    let mut same = 0;
    let mut total = 0;
    for mode in ModelMode::ALL {
        let mut cfg = TrainConfig::default();
        cfg.model.mode = mode;
        cfg.batch_size = 16;
        cfg.steps = 40;
        cfg.log_every = 1;
        let dirs = [tempfile::tempdir().map_err(e)?, tempfile::tempdir().map_err(e)?];
        let mut files = Vec::new();
        for d in &dirs {
            train_run(&cfg, d.path(), RunOptions::default()).map_err(e)?;
            let ck = std::fs::read(d.path().join(CHECKPOINT_FILE)).map_err(e)?;
            let tel = std::fs::read(d.path().join(TELEMETRY_FILE)).map_err(e)?;
            files.push((ck, tel));
        }
        let a = run_training(&cfg, None).map_err(e)?;
        let in_memory = Checkpoint::from_state(&cfg, &a.state).to_bytes();
        total += 1;
        same += usize::from(files[0] == files[1] && in_memory == files[0].0);
    }
    Ok((same == total, format!("{same}/{total} modes bitwise identical (checkpoint and telemetry)")))
}

struct Trained {
    baselines: Vec<Model>,
    hyperclip: Option<Model>,
    rows: Vec<hyperclip::experiments::AblationRow>,
    baseline_time: Duration,
}

fn sweep() -> Result<Trained, String> {
    let plan = AblationPlan::new(TrainConfig::default(), 5);
    let mut baselines = Vec::new();
    let mut hyperclip = None;
    let mut baseline_time = Duration::ZERO;
    let mut clock = Instant::now();
    let rows = run_ablation(&plan, |cfg: &TrainConfig, out: &TrainOutcome, report| {
        let took = clock.elapsed();
        clock = Instant::now();
        eprintln!(
            "  trained {} b={} seed={} zeroshot_acc={:.4} in {:.0}s",
            cfg.model.mode,
            cfg.batch_size,
            cfg.seed,
            report.get("zeroshot_acc").unwrap_or(f64::NAN),
            took.as_secs_f64()
        );
        if cfg.batch_size == 64 {
            match cfg.model.mode {
                ModelMode::Baseline => {
                    baseline_time += took;
                    baselines.push(out.state.model.clone());
                }
                ModelMode::HyperClip if cfg.seed == 0 => hyperclip = Some(out.state.model.clone()),
                _ => {}
            }
        }
        Ok(())
    })
    .map_err(e)?;
    Ok(Trained {
        baselines,
        hyperclip,
        rows,
        baseline_time,
    })
}

fn learning_signal(t: &Trained) -> Verdict {
    let accs: Vec<f64> = t
        .rows
        .iter()
        .filter(|r| r.mode == ModelMode::Baseline && r.batch_size == 64)
        .map(|r| r.zeroshot_acc)
        .collect();
    let hits = accs.iter().filter(|&&a| a >= 0.5).count();
    let minutes = t.baseline_time.as_secs_f64() / 60.0;
    Ok((
        hits >= 4 && accs.len() == 5,
        format!(
            "zero-shot top-1 {:?}, {hits}/5 >= 0.50; 5 runs in {minutes:.1} min (target < 30)",
            accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>()
        ),
    ))
}

fn directional(t: &Trained) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for b in [16, 64] {
        let s = paired_summaries(&t.rows, b)
            .into_iter()
            .find(|s| s.mode == ModelMode::HyperClip)
            .ok_or("missing paired rows")?;
        ok &= s.pairs == 5 && s.mean_gap() >= -0.01 && s.wins_or_ties >= 3;
        parts.push(format!(
            "B={b}: hyperclip {:.4} vs baseline {:.4}, gap {:+.4} (floor -0.01, positive target {}), wins or ties {}/{}",
            s.mean,
            s.baseline_mean,
            s.mean_gap(),
            if s.mean_gap() > 0.0 { "met" } else { "not met" },
            s.wins_or_ties,
            s.pairs
        ));
    }
    Ok((ok, parts.join("; ")))
}

fn ordering(t: &Trained) -> Verdict {
    let prompts = PromptSet::synthetic(&(0..NUM_CLASSES).collect::<Vec<_>>()).map_err(e)?;
    let cfg = TrainConfig::default();
    let (mut probe, mut upper) = (Vec::new(), Vec::new());
    for (seed, m) in t.baselines.iter().take(3).enumerate() {
        let (train, test) = probe_split(seed as u64, 1280, &cfg.render(), cfg.model.text.context).map_err(e)?;
        let pc = ProbeConfig {
            seed: seed as u64,
            ..ProbeConfig::default()
        };
        probe.push(linear_probe(m, &prompts, &train, &test, &pc).map_err(e)?.accuracy);
        upper.push(norm_finetune_upper_bound(m, &prompts, &train, &test, &pc, false).map_err(e)?.accuracy);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ok = probe.len() == 3 && mean(&upper) >= mean(&probe);
    Ok((
        ok,
        format!(
            "upper bound {:.4} >= linear probe {:.4} (per seed {upper:.4?} vs {probe:.4?})",
            mean(&upper),
            mean(&probe)
        ),
    ))
}

fn deployment(t: &Trained) -> Verdict {
    let prompts = PromptSet::synthetic(&(0..NUM_CLASSES).collect::<Vec<_>>()).map_err(e)?;
    let base = t.baselines.first().ok_or("no baseline model")?;
    let base_count = base.fixed_image_params().count("") + base.params.require(OWNED_NORMS).map_err(e)?.numel();
    let untrained = Model::new(
        ModelConfig {
            mode: ModelMode::HyperClipTransformerless,
            ..Default::default()
        },
        0,
    )
    .map_err(e)?;
    let models = [Some(base), t.hyperclip.as_ref(), Some(&untrained)];
    let set = held_out_set(11, 512, &TrainConfig::default().render(), base.cfg.text.context).map_err(e)?;
    let mut ok = true;
    let mut parts = Vec::new();
    for m in models.into_iter().flatten() {
        m.counters.reset();
        let clf = derive_zero_shot(m, &prompts).map_err(e)?;
        let (text, hyper) = (m.counters.text(), m.counters.hyper());
        let y = class_embeddings(m, &prompts).map_err(e)?;
        let norms = m.norms_for(&y).map_err(e)?;
        let x = m.embed_images(&norms, &set.images).map_err(e)?;
        let full = argmax_rows(scores(&x, &y).map_err(e)?.data(), NUM_CLASSES);
        let agree = clf.classify(&set.images).map_err(e)?.iter().zip(&full).filter(|(a, b)| a == b).count();
        let expect_hyper = usize::from(m.mode().uses_hypernet());
        ok &= agree == 512 && clf.encoder_parameter_count() == base_count && text == 1 && hyper == expect_hyper;
        parts.push(format!(
            "{}: {agree}/512 agree, encoder params {} vs baseline {base_count}, forwards text {text} hypernet {hyper}",
            m.mode(),
            clf.encoder_parameter_count()
        ));
    }
    ok &= t.hyperclip.is_some();
    Ok((ok, parts.join("; ")))
}

fn main() -> ExitCode {
    let mut gate = Gate {
        failed: 0,
        gating_failed: 0,
    };
    gate.check(1, "gradient suite", gradients);
    gate.check(2, "hypernet invariance", invariance);
    gate.check(3, "loss oracles", loss_oracles);
    gate.check(8, "metric oracles", metric_oracles);
    gate.check(9, "calibration and telemetry", calibration);
    gate.check(10, "determinism", determinism);
    eprintln!("training the paired sweep (5 seeds x B in {{16, 64}} x baseline/hyperclip)");
    match sweep() {
        Ok(t) => {
            for line in ablation_table(&t.rows).lines() {
                println!("     {line}");
            }
            gate.check(4, "learning signal", || learning_signal(&t));
            gate.report(5, "directional comparison", || directional(&t));
            gate.check(6, "fine-tuning ordering", || ordering(&t));
            gate.check(7, "deployment parity", || deployment(&t));
        }
        Err(err) => {
            for (id, name) in [
                (4, "learning signal"),
                (5, "directional comparison"),
                (6, "fine-tuning ordering"),
                (7, "deployment parity"),
            ] {
                gate.check(id, name, || Err(err.clone()));
            }
        }
    }
    println!(
        "acceptance: {} of 10 criteria failed, {} of them gating",
        gate.failed, gate.gating_failed
    );
    if gate.gating_failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
