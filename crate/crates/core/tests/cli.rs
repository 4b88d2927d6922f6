use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_sdanet");

/// Tiny scenario passed as flag overrides.
const TINY: &[&str] = &[
    "--scenario.train_subjects",
    "2",
    "--scenario.val_subjects=1",
    "--scenario.source_test_subjects",
    "1",
    "--scenario.target_subjects",
    "1",
    "--scenario.slices_per_subject",
    "2",
    "--train.epochs",
    "1",
    "--train.ae_epochs",
    "1",
    "--train.init_candidates",
    "2",
    "--seed",
    "6",
];

fn sdanet(args: &[&str], extra: &[&str]) -> Output {
    Command::new(BIN).args(args).args(extra).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = sdanet(args, TINY);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "adaptation.txt")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).to_string_lossy().into_owned();
    let (data, task, models) = (p("data"), p("task.sdck"), p("models.sdck"));

    let out = ok(&["gen-data", "--out", &data]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("scenario.train_subjects=2"));
    assert!(fs::read_to_string(tmp.path().join("data/config.txt")).unwrap().contains("seed=6"));
    ok(&["train-task", "--data", &data, "--out", &task]);
    ok(&["train-ae", "--data", &data, "--task-checkpoint", &task, "--out", &models]);

    let subject = p("data/target/target-000");
    let (pred1, pred2) = (p("pred1"), p("pred2"));
    ok(&["adapt", "--models", &models, "--subject", &subject, "--out", &pred1]);
    ok(&["adapt", "--models", &models, "--subject", &subject, "--out", &pred2]);
    let (d1, d2) = (tmp.path().join("pred1/target-000"), tmp.path().join("pred2/target-000"));
    assert_eq!(files(&d1), files(&d2));
    let report = fs::read_to_string(d1.join("adaptation.txt")).unwrap();
    assert!(report.contains("stop_reason"), "{report}");

    // ground truth evaluated against itself
    let gt = p("data/target");
    let csv_path = p("self.csv");
    ok(&["evaluate", "--pred", &gt, "--gt", &gt, "--out", &csv_path]);
    let csv = fs::read_to_string(&csv_path).unwrap();
    let dice: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(dice.len(), 6);
    assert!(dice.iter().all(|&d| d == 1.0), "{csv}");

    ok(&["evaluate", "--pred", &pred1, "--gt", &gt, "--out", &p("pred.csv")]);

    // baselines
    let reference = p("data/train/train-000");
    ok(&["adapt", "--models", &models, "--subject", &subject, "--out", &p("na"), "--method", "na"]);
    ok(&["adapt", "--models", &models, "--subject", &subject, "--out", &p("mh"), "--method", "mh", "--reference", &reference]);

    // missing predictions and a mismatched task kind are errors
    let bad = sdanet(&["evaluate", "--pred", &data, "--gt", &gt, "--out", &p("x.csv")], &[]);
    assert_eq!(bad.status.code(), Some(1));
    let bad = sdanet(&["adapt", "--models", &models, "--subject", &subject, "--out", &pred1, "--task", "synthesis"], &[]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn usage_and_input_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope").to_string_lossy().into_owned();
    assert_eq!(sdanet(&["frobnicate"], &[]).status.code(), Some(2));
    assert_eq!(sdanet(&["gen-data"], &[]).status.code(), Some(2));
    let out = sdanet(&["gen-data", "--out", &missing, "--phantom.colour", "red"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("phantom.colour"));
    assert_eq!(sdanet(&["train-task", "--data", &missing, "--out", &missing], &[]).status.code(), Some(1));

    let garbage = tmp.path().join("garbage.sdck");
    fs::write(&garbage, b"SDCK not really a checkpoint").unwrap();
    let g = garbage.to_string_lossy().into_owned();
    let out = sdanet(&["adapt", "--models", &g, "--subject", &missing, "--out", &missing], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_exit_code_reflects_suite() {
    let out = sdanet(&["gradcheck", "--precision", "f64"], &[]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("max f64 error"));
}
