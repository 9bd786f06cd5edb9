use std::fs;
use std::process::{Command, Output};

fn kdlsq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdlsq"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn size_of_full_precision_toy_is_ratio_one() {
    let o = kdlsq(&["size", "--preset", "toy", "--bits", "32-32-32"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("ratio x1.00"), "{}", stdout(&o));
}

#[test]
fn run_commands_require_seed_and_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert!(!kdlsq(&["train", "--out-dir", out]).status.success());
    assert!(!kdlsq(&["ablation", "--seed", "1"]).status.success());
}

#[test]
fn bad_bits_are_rejected() {
    let o = kdlsq(&["size", "--bits", "3-3-3"]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_passes() {
    let o = kdlsq(&["gradcheck", "--stride", "400"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report["scales"]["checked"].as_u64().unwrap() > 0);
}

#[test]
fn teacher_then_train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let teachers = dir.path().join("teachers");
    let small = ["--train-size", "80", "--test-size", "40", "--epochs", "1", "--repetitions", "1"];

    let mut args = vec!["train-teacher", "--seed", "3", "--out-dir", teachers.to_str().unwrap()];
    args.extend(small);
    let o = kdlsq(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = teachers.join("s3/checkpoint.json");
    assert!(ckpt.exists());

    let runs = dir.path().join("runs");
    let mut args = vec![
        "train",
        "--seed",
        "3",
        "--out-dir",
        runs.to_str().unwrap(),
        "--teacher",
        ckpt.to_str().unwrap(),
        "--bits",
        "4-4-8",
        "--mode",
        "kd+gt",
    ];
    args.extend(small);
    let o = kdlsq(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(runs.join("summary.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("4-4-8_kd+gt_truncation_s3,4-4-8,kd+gt"));

    let student = runs.join("runs/4-4-8_kd+gt_truncation_s3/checkpoint.json");
    let config = dir.path().join("spec.json");
    fs::copy(runs.join("spec.json"), &config).unwrap();
    let o = kdlsq(&[
        "eval",
        "--checkpoint",
        student.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(v["bits"], "4-4-8");
    assert_eq!(v["examples"], 40);
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn missing_teacher_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = kdlsq(&[
        "train",
        "--seed",
        "0",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--teacher",
        "/nonexistent/checkpoint.json",
        "--repetitions",
        "1",
    ]);
    assert!(!o.status.success());
}
