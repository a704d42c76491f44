use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sdforest::features::FeatureMap;
use sdforest::tensor_io::{read_mask, write_tensor, Tensor};

fn sdforest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdforest")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, frames: usize, size: usize) {
    let out = sdforest(&["synth", "--out", p(dir), "--frames", &frames.to_string(), "--size", &size.to_string(), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn value(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}: ")))
        .unwrap_or_else(|| panic!("{key} missing from {text}"))
        .parse()
        .unwrap()
}

#[test]
fn segment_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    synth(&seq, 12, 128);
    let pred = dir.path().join("pred");
    let out = sdforest(&[
        "segment",
        "--frames",
        p(&seq.join("frames")),
        "--prompt",
        p(&seq.join("gt/00000.png")),
        "--out",
        p(&pred),
        "--set",
        "slic.k=150",
        "--seed",
        "5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let masks = fs::read_dir(&pred).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(masks, 12);
    let timing = fs::read_to_string(pred.join("timing.txt")).unwrap();
    assert!(value(&timing, "fps") > 0.0);
    assert!(timing.contains("superpixels_ms: "));

    let report = dir.path().join("report.txt");
    let out = sdforest(&["eval", "--pred", p(&pred), "--gt", p(&seq.join("gt")), "--report", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(value(&text, "J_M") >= 0.85, "{text}");
    assert!(value(&text, "fps") > 0.0);
    assert!(fs::read_to_string(report.with_extension("json")).unwrap().contains("\"sequences\""));
}

#[test]
fn single_frame_copies_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    synth(&seq, 1, 64);
    let pred = dir.path().join("pred");
    let prompt = seq.join("gt/00000.png");
    let out = sdforest(&["segment", "--frames", p(&seq.join("frames")), "--prompt", p(&prompt), "--out", p(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_mask(pred.join("00000.png")).unwrap(), read_mask(&prompt).unwrap());
}

#[test]
fn eval_identical_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 5, 48);
    let gt = dir.path().join("gt");
    let out = sdforest(&["eval", "--pred", p(&gt), "--gt", p(&gt)]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for key in ["J_M", "J_O", "F_M", "F_O"] {
        assert_eq!(value(&text, key), 1.0);
    }
    assert_eq!(value(&text, "J_D"), 0.0);
}

#[test]
fn wrong_feature_channels_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("seq");
    synth(&seq, 3, 48);
    let feats = dir.path().join("feats");
    fs::create_dir_all(&feats).unwrap();
    for (i, c) in [(0, 4), (1, 4), (2, 5)] {
        let fm = FeatureMap::new(c, 12, 12, (0..c * 144).map(|v| (v % 7) as f32 / 7.0).collect()).unwrap();
        write_tensor(&fm.to_tensor(), feats.join(format!("{i:05}.sdft"))).unwrap();
    }
    let out = sdforest(&[
        "segment",
        "--frames",
        p(&seq.join("frames")),
        "--prompt",
        p(&seq.join("gt/00000.png")),
        "--out",
        p(&dir.path().join("pred")),
        "--features",
        p(&feats),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("00002.png"), "{err}");
}

#[test]
fn missing_prompt_and_bad_config_fail() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 32);
    let frames = dir.path().join("frames");
    let out = sdforest(&["segment", "--frames", p(&frames), "--prompt", "/nonexistent.png", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "slic.k = 50\nunknown.key = 1\n").unwrap();
    let out = sdforest(&[
        "segment",
        "--frames",
        p(&frames),
        "--prompt",
        p(&dir.path().join("gt/00000.png")),
        "--out",
        p(dir.path()),
        "--config",
        p(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown.key"));
}

#[test]
fn viz_rounds_half_up() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("half.sdft");
    write_tensor(&Tensor::new(vec![4, 5], vec![0.5; 20]).unwrap(), &t).unwrap();
    let out = sdforest(&["viz", "--input", p(&t), "--out", p(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_mask(dir.path().join("half.png")).unwrap();
    assert!(m.labels().iter().all(|&v| v == 128));
}

#[test]
fn bounds_tree_default() {
    let out = sdforest(&["bounds", "tree"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("0.18128"), "{text}");
    let out = sdforest(&["bounds", "margin", "--m", "100", "--b", "0.5"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn features_written_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 2, 24);
    let out_dir = dir.path().join("f");
    let out = sdforest(&["features", "--frames", p(&dir.path().join("frames")), "--out", p(&out_dir)]);
    assert!(out.status.success());
    let t = sdforest::tensor_io::read_tensor(out_dir.join("00001.sdft")).unwrap();
    assert_eq!(t.dims(), &[11, 24, 24]);
}
