use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn coseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coseg")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(coseg(&["coseg", "--k", "3"]).status.code(), Some(1));
    assert_eq!(coseg(&["bogus"]).status.code(), Some(1));
    assert_eq!(coseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_fail_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let r = coseg(&["coseg", "--set", "nope.toml", "--k", "3", "--prior", "nope.json", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!out.exists());
    let r = coseg(&["synth", "--family", "sofa_like", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn synth_then_eval_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let set = dir.path().join("set");
    let r = coseg(&["synth", "--family", "two_box", "--points", "64", "--count", "3", "--out", s(&set)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(set.join("set.toml").is_file());
    let r = coseg(&["eval", "--pred", s(&set), "--gt", s(&set)]);
    assert!(r.status.success());
    let text = String::from_utf8_lossy(&r.stdout);
    assert!(text.lines().any(|l| l.starts_with("mean")), "{text}");
    assert!(text.contains("0.0000"), "{text}");
}

#[test]
fn run_manifest_with_short_stages() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("exp.toml");
    fs::write(
        &manifest,
        r#"
name = "smoke"
out = "out"

[[set.shapes]]
family = "two_box"
n_points = 96
seed = 3
count = 3

[[prior.shapes]]
family = "two_box"
n_points = 96
seed = 10
count = 2

[prior.train]
steps = 2
validation_masks = 2

[coseg]
k = 2
max_iters = 2
"#,
    )
    .unwrap();
    let r = coseg(&["run", "--manifest", s(&manifest)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let out = dir.path().join("out");
    for f in ["prior.json", "prior_curve.csv", "trace.csv", "run.toml", "rand_index.csv", "summary.txt"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    assert!(!out.join("INCOMPLETE").exists());
    assert_eq!(fs::read_dir(out.join("labels")).unwrap().count(), 3);

    let svg = dir.path().join("trace.svg");
    let r = coseg(&["plot", "--input", s(&out.join("trace.csv")), "--out", s(&svg)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

#[test]
fn invalid_manifest_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("exp.toml");
    fs::write(&manifest, "name = \"x\"\nout = \"out\"\n[set]\n[prior]\n").unwrap();
    let r = coseg(&["run", "--manifest", s(&manifest)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn synthetic_rank_probe_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("probe.csv");
    let r = coseg(&["rank-probe", "--synthetic", "--samples", "5", "--out", s(&out)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let text = fs::read_to_string(out).unwrap();
    assert!(text.lines().count() > 15);
}
