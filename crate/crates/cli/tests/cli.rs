use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sanet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sanet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(out: &Path, seed: &str) {
    ok(&["synth", "--out", p(out), "--cases", "2", "--size", "16", "--seed", seed]);
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    synth(&a, "5");
    synth(&b, "5");
    let case = a.join("phantom_001");
    let mut files: Vec<_> = fs::read_dir(&case).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    assert_eq!(files.len(), 5);
    for f in files {
        let rel = Path::new("phantom_001").join(f);
        assert_eq!(fs::read(a.join(&rel)).unwrap(), fs::read(b.join(&rel)).unwrap(), "{rel:?}");
    }
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let first = ok(&["config"]);
    let path = dir.path().join("run.toml");
    fs::write(&path, first.replace("folds = 5", "folds = 3")).unwrap();
    let second = ok(&["--config", p(&path), "config"]);
    assert!(second.contains("folds = 3"));
    assert_eq!(second.replace("folds = 3", "folds = 5"), first);
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[cv]\nfoldz = 3\n").unwrap();
    let out = sanet(&["--config", p(&path), "config"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("foldz"));

    let out = sanet(&["cv", "--folds", "1"]);
    assert_eq!(out.status.code(), Some(1));

    let out = sanet(&["train", "--data", p(&dir.path().join("missing"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = sanet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "1");
    let out = sanet(&[
        "train", "--data", p(&data), "--out", p(&dir.path().join("run")), "--epochs", "2",
        "--base-width", "4", "--patch-size", "16", "--lr", "1e30",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("run/state_dump.json").is_file());
}

#[test]
fn train_infer_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let pred = dir.path().join("pred");
    synth(&data, "2");
    let stdout = ok(&[
        "--exec", "sequential", "train", "--data", p(&data), "--out", p(&run), "--epochs", "2",
        "--base-width", "4", "--patch-size", "16",
    ]);
    assert!(stdout.contains("trained 2 epochs"), "{stdout}");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = run.join("best_val");
    ok(&[
        "infer", "--data", p(&data), "--out", p(&pred), "--checkpoint", p(&ckpt),
        "--ensemble", p(&run.join("best_ema")), "--probabilities",
    ]);
    for id in ["phantom_000", "phantom_001"] {
        assert!(pred.join(format!("{id}_pred.nii.gz")).is_file());
        for r in ["wt", "tc", "et"] {
            assert!(pred.join(format!("{id}_prob_{r}.nii.gz")).is_file());
        }
    }

    let scores = dir.path().join("scores.csv");
    ok(&["evaluate", "--data", p(&data), "--pred", p(&pred), "--out", p(&scores)]);
    let csv = fs::read_to_string(&scores).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "case_id,region,dsc,hd95,sensitivity,specificity");
    // Two cases and two summary rows, three regions each.
    assert_eq!(lines.len(), 1 + 4 * 3);
}

#[test]
fn infer_without_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = sanet(&["infer", "--data", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}
