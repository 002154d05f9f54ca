use bevsync::pipeline::{run_pipeline, snapshot, RunConfig, RunDir, Stage};

fn small() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.stpt.depth = 1;
    cfg.seed = 3;
    cfg
}

#[test]
fn full_run_scores_within_bounds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path());
    let ran = run_pipeline(&small(), &dir, false).unwrap();
    assert_eq!(ran, Stage::ALL.to_vec());
    let r = dir.report().unwrap();
    for v in [r.iou_short, r.iou_long, r.vpq, r.vrq, r.vsq] {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    assert_eq!(dir.config().unwrap(), small());
}

#[test]
fn resume_skips_finished_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path());
    run_pipeline(&small(), &dir, false).unwrap();
    let before = snapshot(tmp.path()).unwrap();
    assert!(run_pipeline(&small(), &dir, true).unwrap().is_empty());
    assert_eq!(snapshot(tmp.path()).unwrap(), before);
}

#[test]
fn invalid_config_fails_before_any_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.stpt.heads = 3;
    let err = run_pipeline(&cfg, &RunDir::new(tmp.path()), false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(snapshot(tmp.path()).unwrap().is_empty());
}
