use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lens_core::interchange::{write_tensor, Precision};
use lens_core::Tensor;

fn lens(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lens"))
        .args(args)
        .current_dir(dir)
        .env_remove("LENS_SEED")
        .output()
        .expect("spawn lens")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gradcheck_passes_on_toy_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = lens(&["gradcheck", "--seed", "7", "--grid", "8"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max_relative_error="));
}

#[test]
fn synthetic_inference_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = lens(&["infer", "--synthetic", "--seed", "3", "--out", "res"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = fs::read(dir.path().join("res/mask.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));
    let kps = fs::read_to_string(dir.path().join("res/keypoints.txt")).unwrap();
    let lines: Vec<&str> = kps.lines().collect();
    assert!(!lines.is_empty() && lines.len() <= 16);
    assert!(lines.iter().all(|l| l.split(' ').count() == 3));
    assert!(dir.path().join("res/grounding.pgm").exists());
}

#[test]
fn inference_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        assert!(lens(&["infer", "--synthetic", "--seed", "5", "--out", out], dir.path()).status.success());
    }
    for f in ["mask.pgm", "grounding.pgm", "keypoints.txt"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn eval_on_identical_pair_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let m = Tensor::new(vec![4, 4], (0..16).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    write_tensor(&dir.path().join("x_pred.ltns"), &m, Precision::F32).unwrap();
    write_tensor(&dir.path().join("x_gt.ltns"), &m, Precision::F64).unwrap();
    let o = lens(&["eval", "--dir", "."], dir.path());
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "gIoU=1.0 cIoU=1.0");
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(lens(&["infer", "--bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(lens(&["eval", "--dir", "missing"], dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("x_pred.ltns"), b"LTNS garbage").unwrap();
    fs::write(dir.path().join("x_gt.ltns"), b"LTNS garbage").unwrap();
    let o = lens(&["eval", "--dir", "."], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn route_classifies_text() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(stdout(&lens(&["route", "please segment the cat"], dir.path())).trim(), "seg");
    assert_eq!(stdout(&lens(&["route", "what is it?"], dir.path())).trim(), "dialogue");
    assert_eq!(stdout(&lens(&["route", "what is it?", "--has-memory"], dir.path())).trim(), "followup");
}

#[test]
fn scripted_session() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("s.txt"),
        "# demo\nsegment the dog\n\nwhat color is the segmented object?\nhow many chairs?\n",
    )
    .unwrap();
    let o = lens(&["route", "--script", "s.txt", "--out", "turns"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let intents: Vec<&str> = out.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(intents, ["seg", "followup", "dialogue"]);
    assert!(out.lines().next().unwrap().ends_with("Sure, the segmentation result is generated."));
    assert!(dir.path().join("turns/turn0.pgm").exists());
    assert!(!dir.path().join("turns/turn1.pgm").exists());
}
