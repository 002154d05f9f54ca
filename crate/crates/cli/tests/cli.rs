use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use bevsync::pipeline::{snapshot, Pnm, RunDir, Stage};

fn bevsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bevsync")).args(args).output().expect("binary runs")
}

fn run(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", dir.to_str().unwrap(), "--pyramid-depth", "2"];
    args.extend_from_slice(extra);
    bevsync(&args)
}

#[test]
fn run_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = RunDir::new(tmp.path());
    for s in Stage::ALL {
        assert!(dir.has(s.artifact()), "{s}");
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("\"VPQ\""));
    assert_eq!(dir.config().unwrap().stpt.depth, 2);
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&a, &["--seed", "11", "--aug", "both"]).status.success());
    assert!(run(&b, &["--seed", "11", "--aug", "both"]).status.success());
    assert_eq!(snapshot(&a).unwrap(), snapshot(&b).unwrap());
}

#[test]
fn stages_run_separately() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    for cmd in ["synth", "encode", "predict", "eval"] {
        let o = bevsync(&[cmd, "--out", out, "--pyramid-depth", "1"]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    // a different depth reuses the encoded map
    let o = bevsync(&["predict", "--out", out, "--pyramid-depth", "3"]);
    assert!(o.status.success());
    assert_eq!(RunDir::new(out).config().unwrap().stpt.depth, 3);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.ini");
    fs::write(&cfg, "[stpt]\nheads = 3\n").unwrap();
    let o = bevsync(&["synth", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("heads"));
    let o = bevsync(&["synth", "--pyramid-depth", "5"]);
    assert_eq!(o.status.code(), Some(2));
    let o = bevsync(&["synth", "--aug", "sideways"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stage_failures_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bevsync(&["encode", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage `encode`"));
}

#[test]
fn viz_attn_images_parse() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(run(tmp.path(), &[]).status.success());
    let out = tmp.path().to_str().unwrap();
    let o = bevsync(&["viz-attn", "--out", out, "--window", "9", "--top-k", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = Pnm::decode(&fs::read(tmp.path().join("attn_w9.pgm")).unwrap()).unwrap();
    assert_eq!((pgm.width, pgm.height, pgm.channels), (48, 48, 1));
    let ppm = Pnm::decode(&fs::read(tmp.path().join("attn_w9_overlay.ppm")).unwrap()).unwrap();
    assert_eq!((ppm.width, ppm.height, ppm.channels), (3 * 32 + 2, 32, 3));
    let o = bevsync(&["viz-attn", "--out", out, "--layer", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn viz_attn_without_cache_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bevsync(&["viz-attn", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("attention cache"));
}

#[test]
fn compare_sync_and_bench_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = bevsync(&["compare-sync", "--out", out]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("frame,method,displacement,oob_fraction,cosine\n"));
    assert_eq!(fs::read_to_string(tmp.path().join("compare_sync.csv")).unwrap(), csv);
    let o = bevsync(&["bench", "--out", out, "--repeats", "1", "--pyramid-depth", "1"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("9.42M") && text.contains("165 ms"));
    assert!(tmp.path().join("bench.json").exists());
}
