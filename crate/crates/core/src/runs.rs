//! Run directories: exclusive locks, manifests, checkpointed training with
//! resume, and output-root resolution.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::persist::Checkpoint;
use crate::train::{initial_state, read_telemetry, train_until, Calibration, TelemetryLog, TelemetryRecord, TrainState};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "HYPERCLIP_OUT";
pub const DEFAULT_OUT: &str = "runs";

pub const LOCK_FILE: &str = "run.lock";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TELEMETRY_FILE: &str = "telemetry.tsv";
pub const TIMING_FILE: &str = "timing.tsv";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// `{mode}-b{batch}-s{seed}-{config hash}`.
pub fn run_id(cfg: &TrainConfig) -> String {
    let h = Sha256::digest(cfg.to_text().as_bytes());
    format!(
        "{}-b{}-s{}-{}",
        cfg.model.mode,
        cfg.batch_size,
        cfg.seed,
        h[..4].iter().map(|b| format!("{b:02x}")).collect::<String>()
    )
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let owner = fs::read_to_string(&path).unwrap_or_default();
                Err(Error::invalid(format!(
                    "{} is locked by process {} (remove {} if that run is gone)",
                    dir.display(),
                    owner.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What a run produced. Paths are relative to the run directory.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub telemetry: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub reports: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>, command: impl Into<String>, seed: u64) -> Self {
        RunManifest {
            run_id: run_id.into(),
            command: command.into(),
            seed,
            ..Default::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("run_id = {}\ncommand = {}\nseed = {}\n", self.run_id, self.command, self.seed);
        let mut line = |k: &str, p: &Path| s.push_str(&format!("{k} = {}\n", p.display()));
        if let Some(p) = &self.config {
            line("config", p);
        }
        if let Some(p) = &self.telemetry {
            line("telemetry", p);
        }
        for p in &self.checkpoints {
            line("checkpoint", p);
        }
        for p in &self.reports {
            line("report", p);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = RunManifest::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line `{line}` lacks `=`")))?;
            let v = v.trim();
            match k.trim() {
                "run_id" => m.run_id = v.to_string(),
                "command" => m.command = v.to_string(),
                "seed" => m.seed = v.parse().map_err(|_| Error::Format(format!("bad manifest seed `{v}`")))?,
                "config" => m.config = Some(v.into()),
                "telemetry" => m.telemetry = Some(v.into()),
                "checkpoint" => m.checkpoints.push(v.into()),
                "report" => m.reports.push(v.into()),
                other => return Err(Error::Format(format!("unknown manifest key `{other}`"))),
            }
        }
        Ok(m)
    }

    pub fn paths(&self) -> impl Iterator<Item = &PathBuf> {
        self.config.iter().chain(&self.telemetry).chain(&self.checkpoints).chain(&self.reports)
    }

    /// Every referenced file exists under `dir`.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        match self.paths().find(|p| !dir.join(p).exists()) {
            Some(p) => Err(Error::invalid(format!("manifest references missing file {}", dir.join(p).display()))),
            None => Ok(()),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }

    fn add_report(&mut self, p: PathBuf) {
        if !self.reports.contains(&p) {
            self.reports.push(p);
        }
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes a text report into `dir` and records it in the manifest.
pub fn add_report(dir: &Path, manifest: &mut RunManifest, name: &str, text: &str) -> Result<PathBuf> {
    write_atomic(&dir.join(name), text.as_bytes())?;
    manifest.add_report(name.into());
    manifest.save(dir)?;
    Ok(dir.join(name))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
    /// Steps between intermediate checkpoints; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            resume: false,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug)]
pub struct TrainRun {
    pub dir: PathBuf,
    pub state: TrainState,
    pub manifest: RunManifest,
    pub calibration: Option<Calibration>,
    pub resumed_from: Option<u64>,
}

/// Trains into `dir`, writing config, telemetry, timing, checkpoint and
/// manifest. With `resume`, continues from the directory's checkpoint; the
/// configs must agree except for `steps`.
pub fn train_run(cfg: &TrainConfig, dir: &Path, opts: RunOptions) -> Result<TrainRun> {
    cfg.validate()?;
    let _lock = RunLock::acquire(dir)?;
    let ck_path = dir.join(CHECKPOINT_FILE);
    let tel_path = dir.join(TELEMETRY_FILE);
    let mut calibration = None;
    let mut event = None;
    let (mut state, resumed_from) = if opts.resume && ck_path.exists() {
        let (saved, state) = Checkpoint::load(&ck_path)?.to_state()?;
        let mut a = saved.clone();
        a.steps = cfg.steps;
        if a.to_text() != cfg.to_text() {
            return Err(Error::config("resume", "configuration differs from the checkpointed run"));
        }
        truncate_telemetry(&tel_path, state.step)?;
        let from = state.step;
        (state, Some(from))
    } else {
        if opts.resume {
            return Err(Error::invalid(format!("nothing to resume: {} does not exist", ck_path.display())));
        }
        let (state, c) = initial_state(cfg)?;
        event = c.as_ref().map(Calibration::event);
        calibration = c;
        (state, None)
    };
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_text().as_bytes())?;
    let mut manifest = RunManifest::new(run_id(cfg), "train", cfg.seed);
    if resumed_from.is_some() {
        if let Ok(previous) = RunManifest::load(dir) {
            manifest.reports = previous.reports;
        }
    }
    manifest.config = Some(CONFIG_FILE.into());
    manifest.telemetry = Some(TELEMETRY_FILE.into());
    manifest.checkpoints = vec![CHECKPOINT_FILE.into()];
    let mut log = TelemetryLog::open(&tel_path, &dir.join(TIMING_FILE), resumed_from.is_some())?;
    let every = if opts.checkpoint_every == 0 { cfg.steps.max(1) } else { opts.checkpoint_every };
    loop {
        let until = (state.step / every + 1) * every;
        train_until(cfg, &mut state, until, Some(&mut log), event.take())?;
        Checkpoint::from_state(cfg, &state).save(&ck_path)?;
        if state.step >= cfg.steps {
            break;
        }
    }
    manifest.save(dir)?;
    Ok(TrainRun {
        dir: dir.to_path_buf(),
        state,
        manifest,
        calibration,
        resumed_from,
    })
}

/// Drops telemetry records past `step` (written after the last checkpoint).
fn truncate_telemetry(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<TelemetryRecord> = read_telemetry(path)?.into_iter().filter(|r| r.step <= step).collect();
    let mut s = TelemetryRecord::header();
    s.push('\n');
    for r in keep {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    write_atomic(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelMode;

    fn tiny() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model.mode = ModelMode::HyperClip;
        cfg.model.image.resolution = 16;
        cfg.batch_size = 4;
        cfg.steps = 6;
        cfg.log_every = 1;
        cfg
    }

    #[test]
    fn manifest_round_trips_and_verifies() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest::new("r", "train", 3);
        m.config = Some("config.txt".into());
        m.reports.push("eval.tsv".into());
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
        assert!(m.verify(dir.path()).is_err());
        fs::write(dir.path().join("config.txt"), "").unwrap();
        fs::write(dir.path().join("eval.tsv"), "").unwrap();
        m.verify(dir.path()).unwrap();
    }

    #[test]
    fn lock_is_exclusive_until_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let cfg = tiny();
        let full = tempfile::tempdir().unwrap();
        let split = tempfile::tempdir().unwrap();
        let opts = RunOptions {
            resume: false,
            checkpoint_every: 2,
        };
        let a = train_run(&cfg, full.path(), opts).unwrap();
        let mut short = cfg.clone();
        short.steps = 3;
        train_run(&short, split.path(), opts).unwrap();
        let b = train_run(&cfg, split.path(), RunOptions { resume: true, ..opts }).unwrap();
        assert_eq!(b.resumed_from, Some(3));
        let ck = |d: &Path| fs::read(d.join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(ck(full.path()), ck(split.path()));
        let hashes = |d: &Path| -> Vec<String> {
            read_telemetry(&d.join(TELEMETRY_FILE)).unwrap().into_iter().map(|r| r.batch_hash).collect()
        };
        assert_eq!(hashes(full.path()), hashes(split.path()));
        assert_eq!(a.state.step, 6);
        a.manifest.verify(full.path()).unwrap();
        // a config change other than `steps` is refused
        let mut other = cfg.clone();
        other.seed = 9;
        assert!(train_run(&other, split.path(), RunOptions { resume: true, ..opts }).is_err());
    }

    #[test]
    fn resume_needs_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let err = train_run(&tiny(), dir.path(), RunOptions { resume: true, checkpoint_every: 0 });
        assert!(err.is_err());
    }
}
