use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hybridnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybridnet")).args(args).output().unwrap()
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn indivisible_group_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = hybridnet(&["--workers", "4", "--mp", "3", "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_cifar_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.bin");
    let dataset = format!("cifar10:{}", missing.display());
    let out = hybridnet(&["--dataset", &dataset, "--net", "vgg", "--out", &out_arg(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn plan_only_lists_modulo_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let out = hybridnet(&[
        "--mode",
        "plan-only",
        "--net",
        "vgg",
        "--dataset",
        "synthetic:n=8,classes=10,dims=3x32x32",
        "--workers",
        "2",
        "--mp",
        "2",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let plan = fs::read_to_string(dir.path().join("plan.txt")).unwrap();
    assert!(plan.contains("MODULO"));
    assert!(plan.contains("LINEAR 4096->512"));
}

#[test]
fn train_artifacts_are_byte_reproducible() {
    let run = |dir: &Path| {
        let out = hybridnet(&[
            "--workers", "2", "--mp", "2", "--batch", "8", "--steps", "3", "--seed", "4", "--out", &out_arg(dir),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    for name in ["steps.csv", "comm_stats.csv", "plan.txt", "summary.txt"] {
        let x = fs::read(a.path().join(name)).unwrap();
        assert!(!x.is_empty(), "{name} is empty");
        assert_eq!(x, fs::read(b.path().join(name)).unwrap(), "{name} differs");
    }
}

#[test]
fn oracle_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = hybridnet(&[
        "--mode",
        "oracle-check",
        "--net",
        "toy",
        "--dataset",
        "synthetic:n=64,classes=4,dims=3x8x8",
        "--workers",
        "4",
        "--mp",
        "2",
        "--batch",
        "8",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = fs::read_to_string(dir.path().join("oracle.txt")).unwrap();
    assert_eq!(report.lines().filter(|l| l.ends_with(",true")).count(), 5);
}

#[test]
fn volume_sweep_reconciles() {
    let dir = tempfile::tempdir().unwrap();
    let out = hybridnet(&[
        "--mode",
        "volume-sweep",
        "--workers",
        "4",
        "--batch",
        "8",
        "--dataset",
        "synthetic:n=64,classes=4,dims=3x8x8",
        "--out",
        &out_arg(dir.path()),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("volume_by_phase.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[2], f[3], "{line}");
    }
}
