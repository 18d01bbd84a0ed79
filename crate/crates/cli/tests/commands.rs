use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn flowdet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowdet"))
        .args(args)
        .current_dir(dir)
        .env_remove("FLOWDET_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = flowdet(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

const SMALL_MODEL: [&str; 6] = [
    "--set",
    "model.image_size=64",
    "--set",
    "model.hidden=16",
    "--set",
    "epochs=1",
];

/// A tiny dataset plus one flow and one diffusion checkpoint, built once.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(
            &root,
            &[
                "dataset",
                "generate",
                "--out",
                "data",
                "--train",
                "8",
                "--val",
                "2",
                "--test",
                "3",
                "--image-size",
                "64",
            ],
        );
        for (name, objective) in [("flow", "flow"), ("diff", "diffusion")] {
            let mut args = vec!["train", "--data", "data", "--out", name, "--eval-proposals", "10"];
            args.extend(SMALL_MODEL);
            let obj = format!("objective={objective}");
            args.extend(["--set", &obj]);
            ok(&root, &args);
        }
        Fixture { _dir: dir, root }
    })
}

#[test]
fn help_lists_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for c in [
        "dataset", "train", "eval", "sweep", "compare", "report", "sample", "rerun",
    ] {
        assert!(text.contains(c), "{c} missing from help");
    }
}

#[test]
fn unknown_flags_and_bad_values_are_usage_errors() {
    let f = fixture();
    assert_eq!(flowdet(&f.root, &["eval", "--bogus"]).status.code(), Some(2));
    let out = flowdet(
        &f.root,
        &[
            "eval",
            "--checkpoint",
            "flow/best.ckpt",
            "--data",
            "data",
            "--steps",
            "0",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));
    let out = flowdet(
        &f.root,
        &[
            "sweep",
            "--checkpoint",
            "flow/best.ckpt",
            "--data",
            "data",
            "--steps-list",
            "0,2",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_data_errors() {
    let f = fixture();
    let out = flowdet(&f.root, &["eval", "--checkpoint", "nope.ckpt", "--data", "data"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!out.stderr.is_empty());
    let out = flowdet(
        &f.root,
        &["eval", "--checkpoint", "flow/best.ckpt", "--data", "missing-dir"],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_hash_mismatch_is_refused() {
    let f = fixture();
    let out = flowdet(
        &f.root,
        &[
            "eval",
            "--checkpoint",
            "flow/best.ckpt",
            "--data",
            "data",
            "--expect-config-hash",
            "0000000000000000",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("0000000000000000"));
}

#[test]
fn training_writes_checkpoints_history_and_manifest() {
    let f = fixture();
    for file in [
        "best.ckpt",
        "last.ckpt",
        "state.ckpt",
        "history.jsonl",
        "config.json",
        "test_report.json",
        "manifest.json",
    ] {
        assert!(f.root.join("flow").join(file).exists(), "{file}");
    }
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.root.join("flow/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"]["command"], "train");
    assert!(m["config_hash"].as_str().is_some_and(|h| h.len() == 16));
    assert!(m["tool_version"].is_string() && m["library_version"].is_string());
}

#[test]
fn eval_is_byte_reproducible_and_reruns_from_its_manifest() {
    let f = fixture();
    let args = [
        "eval",
        "--checkpoint",
        "flow/best.ckpt",
        "--data",
        "data",
        "--steps",
        "2",
        "--proposals",
        "15",
    ];
    ok(&f.root, &[&args[..], &["--out", "ev1"]].concat());
    ok(&f.root, &[&args[..], &["--out", "ev2"]].concat());
    let a = fs::read(f.root.join("ev1/report.json")).unwrap();
    assert_eq!(a, fs::read(f.root.join("ev2/report.json")).unwrap());
    ok(&f.root, &["rerun", "--manifest", "ev1/manifest.json", "--out", "ev3"]);
    assert_eq!(a, fs::read(f.root.join("ev3/report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["inference"]["steps"], 2);
    assert!(f.root.join("ev1/report.txt").exists());
}

#[test]
fn sample_is_byte_reproducible() {
    let f = fixture();
    let args = [
        "sample",
        "--checkpoint",
        "flow/best.ckpt",
        "--data",
        "data",
        "--limit",
        "2",
    ];
    ok(&f.root, &[&args[..], &["--out", "s1"]].concat());
    ok(&f.root, &["rerun", "--manifest", "s1/manifest.json", "--out", "s2"]);
    assert_eq!(
        fs::read(f.root.join("s1/samples.json")).unwrap(),
        fs::read(f.root.join("s2/samples.json")).unwrap()
    );
}

#[test]
fn singleton_sweep_is_a_one_cell_grid() {
    let f = fixture();
    ok(
        &f.root,
        &[
            "sweep",
            "--checkpoint",
            "flow/best.ckpt",
            "--data",
            "data",
            "--steps-list",
            "3",
            "--proposals-list",
            "12",
            "--out",
            "sw1",
        ],
    );
    let csv = fs::read_to_string(f.root.join("sw1/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
    assert!(lines[1].starts_with("3,12,"));
    for plot in ["ap_vs_steps.svg", "ap_vs_proposals.svg"] {
        assert!(fs::read_to_string(f.root.join("sw1").join(plot))
            .unwrap()
            .starts_with("<svg"));
    }
}

#[test]
fn sweep_covers_the_full_grid() {
    let f = fixture();
    ok(
        &f.root,
        &[
            "sweep",
            "--checkpoint",
            "flow/best.ckpt",
            "--data",
            "data",
            "--steps-list",
            "1,2,3,4",
            "--proposals-list",
            "12,20",
            "--out",
            "sw8",
        ],
    );
    let csv = fs::read_to_string(f.root.join("sw8/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn compare_reports_one_row_per_step_count() {
    let f = fixture();
    ok(
        &f.root,
        &[
            "compare",
            "--flow",
            "flow/best.ckpt",
            "--diffusion",
            "diff/best.ckpt",
            "--data",
            "data",
            "--steps-list",
            "3",
            "--proposals",
            "10",
            "--out",
            "cmp1",
        ],
    );
    let csv = fs::read_to_string(f.root.join("cmp1/compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().next().unwrap().contains("ratio"));
    // one checkpoint under both samplers is still a valid comparison
    ok(
        &f.root,
        &[
            "compare",
            "--flow",
            "flow/best.ckpt",
            "--diffusion",
            "flow/best.ckpt",
            "--data",
            "data",
            "--steps-list",
            "1,2",
            "--proposals",
            "10",
            "--out",
            "cmp2",
        ],
    );
    assert_eq!(
        fs::read_to_string(f.root.join("cmp2/compare.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
}

#[test]
fn compare_refuses_different_architectures() {
    let f = fixture();
    let mut args = vec!["train", "--data", "data", "--out", "wide", "--eval-proposals", "5"];
    args.extend([
        "--set",
        "model.image_size=64",
        "--set",
        "model.hidden=24",
        "--set",
        "epochs=1",
        "--set",
        "objective=diffusion",
    ]);
    ok(&f.root, &args);
    let out = flowdet(
        &f.root,
        &[
            "compare",
            "--flow",
            "flow/best.ckpt",
            "--diffusion",
            "wide/best.ckpt",
            "--data",
            "data",
            "--out",
            "cmp3",
        ],
    );
    assert!(!out.status.success());
    assert!(!f.root.join("cmp3/compare.csv").exists());
}

#[test]
fn report_summarises_a_run() {
    let f = fixture();
    ok(&f.root, &["report", "--run", "flow", "--out", "rep"]);
    for file in ["summary.txt", "summary.json", "loss.svg", "val_ap.svg"] {
        assert!(f.root.join("rep").join(file).exists(), "{file}");
    }
}

#[test]
fn output_root_applies_to_relative_outputs() {
    let f = fixture();
    let root = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_flowdet"))
        .args([
            "dataset",
            "generate",
            "--out",
            "gen",
            "--count",
            "2",
            "--image-size",
            "64",
        ])
        .current_dir(&f.root)
        .env("FLOWDET_OUTPUT_ROOT", root.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.path().join("gen/annotations.json").exists());
    assert!(!f.root.join("gen").exists());
}
