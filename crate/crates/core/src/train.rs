//! Joint training loop, telemetry, and weight-scale calibration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::config::TrainConfig;
use crate::data::{sample_batch, Batch};
use crate::error::{Error, Result};
use crate::hypernet::{calibrate_weight_scale, LOG_WEIGHT_SCALE};
use crate::image_encoder::OWNED_NORMS;
use crate::loss::{ETA_RAW, ZETA};
use crate::model::{Model, ModelMode};
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::rng::substream;
use crate::tensor::{Graph, Mode, Tensor, TensorError};

/// Telemetry groups, in column order.
pub const COMPONENTS: [&str; 6] = ["text", "image", "norms", "hyper", "eta", "zeta"];

pub fn component_of(name: &str) -> usize {
    match name {
        OWNED_NORMS => 2,
        ETA_RAW => 4,
        ZETA => 5,
        n if n.starts_with("text.") => 0,
        n if n.starts_with("image.") => 1,
        _ => 3,
    }
}

fn component_norms(params: &ParamStore) -> [f64; 6] {
    let mut sq = [0.0; 6];
    for (name, t) in params.iter() {
        sq[component_of(name)] += t.l2_norm().powi(2);
    }
    sq.map(f64::sqrt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRecord {
    pub step: u64,
    pub loss: f32,
    pub eta: f32,
    pub zeta: f32,
    pub param_norms: [f64; 6],
    pub update_norms: [f64; 6],
    pub batch_hash: String,
    pub event: String,
}

impl TelemetryRecord {
    pub fn header() -> String {
        let mut h = String::from("step\tloss\teta\tzeta");
        for c in COMPONENTS {
            let _ = write!(h, "\tparam_norm.{c}");
        }
        for c in COMPONENTS {
            let _ = write!(h, "\tupdate_norm.{c}");
        }
        h.push_str("\tbatch_hash\tevent");
        h
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("{}\t{}\t{}\t{}", self.step, self.loss, self.eta, self.zeta);
        for v in self.param_norms.iter().chain(&self.update_norms) {
            let _ = write!(s, "\t{v}");
        }
        let event = if self.event.is_empty() { "-" } else { &self.event };
        let _ = write!(s, "\t{}\t{}", self.batch_hash, event);
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 18 {
            return Err(Error::Format(format!("telemetry line has {} fields, expected 18", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Format(format!("bad telemetry field {i}: `{}`", f[i])))
        };
        let mut param_norms = [0.0; 6];
        let mut update_norms = [0.0; 6];
        for c in 0..6 {
            param_norms[c] = num(4 + c)?;
            update_norms[c] = num(10 + c)?;
        }
        Ok(TelemetryRecord {
            step: num(0)? as u64,
            loss: num(1)? as f32,
            eta: num(2)? as f32,
            zeta: num(3)? as f32,
            param_norms,
            update_norms,
            batch_hash: f[16].to_string(),
            event: if f[17] == "-" { String::new() } else { f[17].to_string() },
        })
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.eta.is_finite()
            && self.zeta.is_finite()
            && self.param_norms.iter().chain(&self.update_norms).all(|v| v.is_finite())
    }
}

/// Telemetry file plus a separate wall-clock timing file.
pub struct TelemetryLog {
    telemetry: BufWriter<File>,
    timing: BufWriter<File>,
}

impl TelemetryLog {
    /// Opens both files; `append` keeps existing records (resume).
    pub fn open(telemetry: &Path, timing: &Path, append: bool) -> Result<Self> {
        let open = |p: &Path| -> Result<(File, bool)> {
            let fresh = !append || !p.exists() || std::fs::metadata(p)?.len() == 0;
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(p)?;
            Ok((f, fresh))
        };
        let (tf, t_fresh) = open(telemetry)?;
        let (mf, m_fresh) = open(timing)?;
        let mut log = TelemetryLog {
            telemetry: BufWriter::new(tf),
            timing: BufWriter::new(mf),
        };
        if t_fresh {
            writeln!(log.telemetry, "{}", TelemetryRecord::header())?;
        }
        if m_fresh {
            writeln!(log.timing, "step\tsteps_per_sec")?;
        }
        log.flush()?;
        Ok(log)
    }

    fn write(&mut self, rec: &TelemetryRecord, steps_per_sec: f64) -> Result<()> {
        writeln!(self.telemetry, "{}", rec.to_line())?;
        writeln!(self.timing, "{}\t{:.3}", rec.step, steps_per_sec)?;
        self.flush()
    }

    pub fn flush(&mut self) -> Result<()> {
        self.telemetry.flush()?;
        self.timing.flush()?;
        Ok(())
    }
}

pub fn read_telemetry(path: &Path) -> Result<Vec<TelemetryRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(TelemetryRecord::header().as_str()) {
        return Err(Error::Format(format!("{} lacks the telemetry header", path.display())));
    }
    lines.map(TelemetryRecord::parse_line).collect()
}

/// Model, optimizer and step counter.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub optim: AdamW,
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(TrainState {
            model: Model::new(cfg.model.clone(), cfg.seed)?,
            optim: AdamW::new(cfg.optim),
            step: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub loss: f32,
    /// L2 norm of this step's parameter change, per component.
    pub update_norms: [f64; 6],
}

/// Forward, backward, running-stat update and one optimizer step.
pub fn train_step(state: &mut TrainState, batch: &Batch, cfg: &TrainConfig) -> Result<StepResult> {
    let model = &mut state.model;
    let mut g = Graph::<f32>::new();
    let p = model.params.bind(&mut g, |_| true);
    let images = g.constant(batch.images.clone());
    let mut rng = substream(cfg.seed, "dropout", state.step);
    let fwd = model.forward(&mut g, &p, images, &batch.captions, Mode::Train, &mut rng)?;
    let loss = g.data(fwd.loss)[0];
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            op: "loss",
            index: 0,
            shape: vec![1],
        }
        .into());
    }
    g.backward(fwd.loss)?;
    let grads: BTreeMap<String, Tensor<f32>> = p.iter().map(|(n, &v)| (n.clone(), g.grad_tensor(v))).collect();
    model.stats.absorb(&fwd.batch_stats)?;
    let deltas = state.optim.step(&mut model.params, &grads)?;
    let mut sq = [0.0; 6];
    for (name, d) in deltas {
        sq[component_of(&name)] += d;
    }
    state.step += 1;
    Ok(StepResult {
        loss,
        update_norms: sq.map(f64::sqrt),
    })
}

/// Result of the weight-scale warmup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub weight_scale: f64,
    /// Norm of the warmed-up baseline's norm parameters.
    pub baseline_norm: f64,
    /// Unscaled output norm of the warmed-up hypernet on the calibration batch.
    pub hyper_norm: f64,
    /// `‖S_w · H(Y')‖ / baseline_norm` on the next, unseen batch.
    pub fresh_ratio: f64,
}

impl Calibration {
    pub fn event(&self) -> String {
        format!(
            "calibration:weight_scale={};baseline_norm={};hyper_norm={};fresh_ratio={}",
            self.weight_scale, self.baseline_norm, self.hyper_norm, self.fresh_ratio
        )
    }
}

fn needs_calibration(cfg: &TrainConfig) -> bool {
    cfg.model.mode.uses_hypernet() && cfg.model.hyper.weight_scale && cfg.warmup_steps > 0
}

/// Trains a baseline probe and an unscaled hypernet probe for the warmup
/// budget, then matches the hypernet output norm to the baseline's.
pub fn calibrate(cfg: &TrainConfig) -> Result<Calibration> {
    let mut probe = cfg.clone();
    probe.steps = cfg.warmup_steps;
    probe.model.hyper.weight_scale = false;
    let mut base_cfg = probe.clone();
    base_cfg.model.mode = ModelMode::Baseline;
    let mut base = TrainState::new(&base_cfg)?;
    continue_training(&base_cfg, &mut base, None, None)?;
    let mut hyp = TrainState::new(&probe)?;
    continue_training(&probe, &mut hyp, None, None)?;
    let baseline_norm = base.model.params.require(OWNED_NORMS)?.l2_norm();
    let hyper_norm_on = |step: u64| -> Result<f64> {
        let batch = sample_batch(cfg.seed, step, cfg.batch_size, &cfg.render(), cfg.model.text.context)?;
        let y = hyp.model.embed_text(&batch.captions)?;
        Ok(hyp.model.raw_hyper_norm(&y)?.unwrap_or(0.0))
    };
    let hyper_norm = hyper_norm_on(cfg.warmup_steps)?;
    let weight_scale = calibrate_weight_scale(baseline_norm, hyper_norm)?;
    let fresh = hyper_norm_on(cfg.warmup_steps + 1)?;
    Ok(Calibration {
        weight_scale,
        baseline_norm,
        hyper_norm,
        fresh_ratio: weight_scale * fresh / baseline_norm.max(1e-12),
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub telemetry: Vec<TelemetryRecord>,
    pub calibration: Option<Calibration>,
}

/// Fresh state for `cfg`, with the weight scale set by the calibration
/// warmup when the config asks for one.
pub fn initial_state(cfg: &TrainConfig) -> Result<(TrainState, Option<Calibration>)> {
    cfg.validate()?;
    let calibration = if needs_calibration(cfg) { Some(calibrate(cfg)?) } else { None };
    let mut state = TrainState::new(cfg)?;
    if let Some(c) = &calibration {
        state
            .model
            .params
            .insert(LOG_WEIGHT_SCALE, Tensor::scalar(c.weight_scale.ln() as f32));
    }
    Ok((state, calibration))
}

/// Full run: optional calibration warmup, then `cfg.steps` steps from a
/// fresh initialization.
pub fn run_training(cfg: &TrainConfig, log: Option<&mut TelemetryLog>) -> Result<TrainOutcome> {
    let (mut state, calibration) = initial_state(cfg)?;
    let event = calibration.as_ref().map(Calibration::event);
    let telemetry = continue_training(cfg, &mut state, log, event)?;
    Ok(TrainOutcome {
        state,
        telemetry,
        calibration,
    })
}

/// Runs from `state.step` up to `cfg.steps`. Batches depend only on
/// `(seed, step)`, so a resumed run sees the same stream.
pub fn continue_training(
    cfg: &TrainConfig,
    state: &mut TrainState,
    log: Option<&mut TelemetryLog>,
    event: Option<String>,
) -> Result<Vec<TelemetryRecord>> {
    train_until(cfg, state, cfg.steps, log, event)
}

/// Like [`continue_training`] but stops after step `until`; the logging
/// cadence still follows `cfg.steps`.
pub fn train_until(
    cfg: &TrainConfig,
    state: &mut TrainState,
    until: u64,
    mut log: Option<&mut TelemetryLog>,
    mut event: Option<String>,
) -> Result<Vec<TelemetryRecord>> {
    let render = cfg.render();
    let mut records: Vec<TelemetryRecord> = Vec::new();
    let mut last_line = String::from("<no telemetry yet>");
    let mut clock = Instant::now();
    let mut since = 0u64;
    while state.step < until.min(cfg.steps) {
        let batch = sample_batch(cfg.seed, state.step, cfg.batch_size, &render, cfg.model.text.context)?;
        let res = match train_step(state, &batch, cfg) {
            Ok(r) => r,
            Err(Error::Tensor(e @ (TensorError::NonFinite { .. } | TensorError::NonFiniteGrad(_)))) => {
                if let Some(l) = log.as_deref_mut() {
                    l.flush()?;
                }
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    diagnostic: format!("{last_line} ({e})"),
                });
            }
            Err(e) => {
                if let Some(l) = log.as_deref_mut() {
                    l.flush()?;
                }
                return Err(e);
            }
        };
        since += 1;
        let s = state.step;
        if s % cfg.log_every == 0 || s == 1 || s == cfg.steps {
            let p = &state.model.params;
            let rec = TelemetryRecord {
                step: s,
                loss: res.loss,
                eta: p.require(ETA_RAW)?.data()[0].exp(),
                zeta: p.require(ZETA)?.data()[0],
                param_norms: component_norms(p),
                update_norms: res.update_norms,
                batch_hash: batch.hash(),
                event: event.take().unwrap_or_default(),
            };
            let rate = since as f64 / clock.elapsed().as_secs_f64().max(1e-9);
            clock = Instant::now();
            since = 0;
            if let Some(l) = log.as_deref_mut() {
                l.write(&rec, rate)?;
            }
            last_line = rec.to_line();
            records.push(rec);
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(mode: ModelMode) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.mode = mode;
        cfg.batch_size = 4;
        cfg.steps = 3;
        cfg.log_every = 1;
        cfg.model.image.resolution = 16;
        cfg
    }

    #[test]
    fn zero_lr_step_changes_nothing() {
        let mut cfg = tiny(ModelMode::HyperClip);
        cfg.optim.lr = 0.0;
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.model.params.clone();
        let batch = sample_batch(0, 0, 4, &cfg.render(), 16).unwrap();
        let r = train_step(&mut state, &batch, &cfg).unwrap();
        assert!(r.loss.is_finite());
        assert_eq!(state.model.params, before);
    }

    #[test]
    fn every_component_moves_in_hyperclip_mode() {
        let cfg = tiny(ModelMode::HyperClip);
        let mut state = TrainState::new(&cfg).unwrap();
        let batch = sample_batch(0, 0, 4, &cfg.render(), 16).unwrap();
        let r = train_step(&mut state, &batch, &cfg).unwrap();
        for c in [0, 1, 3, 4, 5] {
            assert!(r.update_norms[c] > 0.0, "{} did not update", COMPONENTS[c]);
        }
        assert_eq!(r.update_norms[2], 0.0);
    }

    #[test]
    fn telemetry_round_trips_through_text() {
        let cfg = tiny(ModelMode::Baseline);
        let out = run_training(&cfg, None).unwrap();
        assert_eq!(out.telemetry.len(), 3);
        for rec in &out.telemetry {
            assert!(rec.is_finite());
            assert_eq!(&TelemetryRecord::parse_line(&rec.to_line()).unwrap(), rec);
        }
        assert_eq!(out.state.model.params.count("hyper."), 0);
    }

    #[test]
    fn component_routing() {
        assert_eq!(component_of("text.tok"), 0);
        assert_eq!(component_of("image.conv0.w"), 1);
        assert_eq!(component_of("image.norms"), 2);
        assert_eq!(component_of("hyper.out.w"), 3);
        assert_eq!(component_of("loss.eta_raw"), 4);
        assert_eq!(component_of("loss.zeta"), 5);
    }

    #[test]
    fn blown_up_loss_aborts_with_diagnostic() {
        let mut cfg = tiny(ModelMode::Baseline);
        cfg.model.loss.eta_raw = 200.0;
        match run_training(&cfg, None) {
            Err(Error::NonFiniteLoss { step, .. }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
    }
}
