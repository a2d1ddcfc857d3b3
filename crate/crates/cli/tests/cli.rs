use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--per-class",
    "30",
    "--test-per-class",
    "10",
    "--hidden",
    "16",
    "--k",
    "6",
    "--constraints",
    "80",
    "--epochs",
    "5",
    "--restarts",
    "2",
    "--lr",
    "0.003",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairclust"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out-dir", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn repeated_train_gives_identical_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train_into(&a, &[]).status.success());
    assert!(train_into(&b, &[]).status.success());
    let ra = fs::read(a.join("report.csv")).unwrap();
    let rb = fs::read(b.join("report.csv")).unwrap();
    assert!(!ra.is_empty());
    assert_eq!(ra, rb);
    for name in ["contingency.csv", "manifest", "model.bin"] {
        assert!(a.join(name).exists(), "{name}");
    }
}

#[test]
fn different_seed_changes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(train_into(&a, &["--seed", "1"]).status.success());
    assert!(train_into(&b, &["--seed", "2"]).status.success());
    assert_ne!(
        fs::read(a.join("report.csv")).unwrap(),
        fs::read(b.join("report.csv")).unwrap()
    );
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.cfg");
    fs::write(&cfg, "# small run\nk = 3\nepochs = 2\nrestarts = 1\n").unwrap();
    let out = tmp.path().join("run");
    let mut args = vec!["train", "--config", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    assert!(run(&args).status.success());
    let manifest = fs::read_to_string(out.join("manifest")).unwrap();
    // SMALL sets k = 6 and restarts = 2 after the file is read.
    assert!(manifest.lines().any(|l| l == "k = 6"), "{manifest}");
    assert!(manifest.lines().any(|l| l == "restarts = 2"), "{manifest}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let out = run(&["train", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn gen_blobs_writes_labeled_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("blobs.csv");
    let out = run(&["gen-blobs", "--classes", "3", "--per-class", "7", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("label,f1,f2"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 21);
    assert!(rows.iter().all(|r| r.split(',').count() == 3));
}

#[test]
fn gen_constraints_round_trips_through_training() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("c.txt");
    let mut args = vec!["gen-constraints", "--out", file.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    assert!(run(&args).status.success());
    let text = fs::read_to_string(&file).unwrap();
    assert!(text.contains("# n_samples=120"), "{text}");
    let pairs: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(pairs.len(), 80);
    assert!(pairs.iter().all(|l| l.ends_with(",+1") || l.ends_with(",-1")));

    let out = tmp.path().join("run");
    let trained = train_into(&out, &["--constraint-file", file.to_str().unwrap()]);
    assert!(trained.status.success(), "{}", String::from_utf8_lossy(&trained.stderr));
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.contains("run,constraints,80\n"), "{report}");
}

#[test]
fn gradcheck_passes() {
    let out = run(&["gradcheck", "--configs", "10"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn gradcheck_fails_with_a_coarse_step() {
    // A step this large swamps the derivative with truncation error.
    let out = run(&["gradcheck", "--configs", "10", "--step", "0.5"]);
    assert!(!out.status.success());
}

#[test]
fn eval_reads_saved_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    assert!(train_into(&dir, &[]).status.success());
    let model = dir.join("model.bin");
    let mut args = vec!["eval", "--model", model.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.starts_with("split,metric,value"));
    assert!(stdout.contains("test,purity,"));
}
