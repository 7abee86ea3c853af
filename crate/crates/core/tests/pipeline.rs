use hyperclip::config::TrainConfig;
use hyperclip::hypernet::{WEIGHT_SCALE_MAX, WEIGHT_SCALE_MIN};
use hyperclip::model::ModelMode;
use hyperclip::persist::Checkpoint;
use hyperclip::runs::{train_run, RunOptions, CHECKPOINT_FILE, TELEMETRY_FILE};
use hyperclip::train::{read_telemetry, run_training, COMPONENTS};

fn small(mode: ModelMode, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.model.mode = mode;
    cfg.batch_size = 8;
    cfg.steps = steps;
    cfg.seed = 3;
    cfg
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    for mode in ModelMode::ALL {
        let mut cfg = small(mode, 12);
        cfg.log_every = 1;
        let a = run_training(&cfg, None).unwrap();
        let b = run_training(&cfg, None).unwrap();
        let bytes = |o: &hyperclip::train::TrainOutcome| Checkpoint::from_state(&cfg, &o.state).to_bytes();
        assert_eq!(bytes(&a), bytes(&b), "{mode}");
        let lines = |o: &hyperclip::train::TrainOutcome| o.telemetry.iter().map(|r| r.to_line()).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b), "{mode}");
    }
}

#[test]
fn run_directories_reproduce_checkpoint_and_telemetry_files() {
    let cfg = small(ModelMode::HyperClip, 10);
    let read = |dir: &std::path::Path| {
        (
            std::fs::read(dir.join(CHECKPOINT_FILE)).unwrap(),
            std::fs::read(dir.join(TELEMETRY_FILE)).unwrap(),
        )
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_run(&cfg, a.path(), RunOptions::default()).unwrap();
    train_run(&cfg, b.path(), RunOptions::default()).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn telemetry_covers_every_logging_step() {
    let mut cfg = small(ModelMode::HyperClip, 9);
    cfg.log_every = 4;
    let out = run_training(&cfg, None).unwrap();
    let steps: Vec<u64> = out.telemetry.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![1, 4, 8, 9]);
    let hyper = COMPONENTS.iter().position(|&c| c == "hyper").unwrap();
    let image = COMPONENTS.iter().position(|&c| c == "image").unwrap();
    for r in &out.telemetry {
        assert!(r.is_finite());
        assert!(r.param_norms[hyper] > 0.0 && r.update_norms[hyper] > 0.0);
        assert!(r.param_norms[image] > 0.0 && r.update_norms[image] > 0.0);
    }
    let dir = tempfile::tempdir().unwrap();
    train_run(&cfg, dir.path(), RunOptions::default()).unwrap();
    let logged = read_telemetry(&dir.path().join(TELEMETRY_FILE)).unwrap();
    assert_eq!(logged, out.telemetry);
}

#[test]
fn weight_scale_warmup_matches_baseline_norm() {
    let mut cfg = small(ModelMode::HyperClip, 3);
    cfg.model.hyper.weight_scale = true;
    cfg.warmup_steps = 40;
    cfg.batch_size = 16;
    let out = run_training(&cfg, None).unwrap();
    let c = out.calibration.expect("calibration ran");
    assert!((WEIGHT_SCALE_MIN..=WEIGHT_SCALE_MAX).contains(&c.weight_scale));
    assert!(c.baseline_norm > 0.0 && c.hyper_norm > 0.0);
    assert!((0.5..=2.0).contains(&c.fresh_ratio), "{c:?}");
    assert!(out.telemetry[0].event.starts_with("calibration:"));
    // the baseline has nothing to calibrate
    let mut base = cfg.clone();
    base.model.mode = ModelMode::Baseline;
    assert!(run_training(&base, None).unwrap().calibration.is_none());
}
