use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pgdtrim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgdtrim")).args(args).output().expect("binary runs")
}

fn digits() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/digits14")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn trained_model(dir: &Path) -> PathBuf {
    let model = dir.join("mlp.bin");
    let out = pgdtrim(&[
        "train-toy",
        "--data",
        digits().to_str().unwrap(),
        "--split",
        "train",
        "--arch",
        "mlp:16",
        "--epochs",
        "3",
        "--eval-split",
        "test",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["eval_accuracy"].as_f64().unwrap() > 0.5);
    model
}

#[test]
fn unknown_subcommand_and_flag() {
    let o = pgdtrim(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
    let o = pgdtrim(&["asr", "--no-such-flag"]);
    assert!(!o.status.success());
}

#[test]
fn sweep_requires_seed() {
    let o = pgdtrim(&["sweep", "--data", "x", "--model", "m.bin"]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("--seed"), "{e}");
    assert!(e.contains("Usage"), "{e}");
}

#[test]
fn attack_divisibility_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let o = pgdtrim(&[
        "attack",
        "--data",
        digits().to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--eps0",
        "6",
        "--kernel",
        "2x2",
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("divisible"), "{}", stderr(&o));
}

#[test]
fn attack_sweep_and_asr() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let data = digits();
    let fast = ["--iterations", "10", "--mc", "50", "--n-trim", "2", "--restarts", "1"];

    let mut args = vec!["attack", "--data", data.to_str().unwrap(), "--model", model.to_str().unwrap(), "--eps0", "8", "--index", "3"];
    args.extend(fast);
    let o = pgdtrim(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["record"]["pixel_l0"], 8);

    let out = dir.path().join("sweep");
    let mut args = vec![
        "sweep",
        "--data",
        data.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--eps0",
        "2,8",
        "--limit",
        "3",
        "--seed",
        "9",
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend(fast);
    let o = pgdtrim(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.starts_with("eps0,rows,attacked,successes,asr\n"));
    assert_eq!(std::fs::read_to_string(out.join("rows.jsonl")).unwrap().lines().count(), 6);

    let o = pgdtrim(&["asr", "--rows", out.join("rows.jsonl").to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), summary);
}

#[test]
fn sweep_output_dir_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let model = trained_model(dir.path());
    let out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_pgdtrim"))
        .args([
            "sweep",
            "--data",
            digits().to_str().unwrap(),
            "--model",
            model.to_str().unwrap(),
            "--eps0",
            "4",
            "--limit",
            "1",
            "--seed",
            "1",
            "--iterations",
            "5",
            "--mc",
            "20",
            "--restarts",
            "1",
        ])
        .env("PGDTRIM_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("summary.csv").exists());
}

#[test]
fn verify_passes() {
    let o = pgdtrim(&["verify"]);
    let report = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{report}");
    assert_eq!(report.lines().filter(|l| l.starts_with("[PASS]")).count(), 9, "{report}");
}
