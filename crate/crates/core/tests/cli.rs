//! `lseg` driven in-process on a small phantom set.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use lesionseg::cli::{exit_code, run_args, EXIT_CONFIG, EXIT_DATA};

fn lseg(args: &[&str]) -> anyhow::Result<()> {
    let mut full = vec!["lseg", "--sequential"];
    full.extend_from_slice(args);
    run_args(full)
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Phantom set with pseudo-masks, shared by the tests that only read it.
fn prepared() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        lseg(&["phantom", "--out", &s(root), "--count", "12", "--clusters", "2", "--seed", "3"]).unwrap();
        lseg(&["gen-masks", "--config", &s(&root.join("pipeline.toml"))]).unwrap();
        dir
    })
    .path()
}

/// Copy of the prepared set, so a test can write into its own work dir.
fn scratch_copy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_tree(prepared(), dir.path());
    dir
}

fn copy_tree(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_tree(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

fn loss_iters(path: PathBuf) -> Vec<usize> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("iter,lr,loss"));
    lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect()
}

#[test]
fn phantom_and_gen_masks_outputs() {
    let root = prepared();
    let manifest = std::fs::read_to_string(root.join("work/manifest.csv")).unwrap();
    assert_eq!(manifest.lines().count(), 13);
    assert_eq!(std::fs::read_dir(root.join("images")).unwrap().count(), 12);
    assert_eq!(std::fs::read_dir(root.join("gt")).unwrap().count(), 12);
}

#[test]
fn train_then_resume_continues_numbering() {
    let dir = scratch_copy();
    let cfg = s(&dir.path().join("pipeline.toml"));
    lseg(&["train", "--config", &cfg, "--iters-per-epoch", "6", "--epochs", "2"]).unwrap();
    assert_eq!(loss_iters(dir.path().join("work/loss.csv")), (0..12).collect::<Vec<_>>());
    lseg(&["train", "--config", &cfg, "--iters-per-epoch", "6", "--epochs", "3", "--resume"]).unwrap();
    assert_eq!(loss_iters(dir.path().join("work/loss.csv")), (0..18).collect::<Vec<_>>());
}

#[test]
fn identity_crf_leaves_masks_unchanged() {
    let dir = scratch_copy();
    let root = dir.path();
    let cfg_path = root.join("pipeline.toml");
    let cfg = s(&cfg_path);
    lseg(&["train", "--config", &cfg, "--iters-per-epoch", "4", "--epochs", "1"]).unwrap();
    let plain = root.join("plain");
    lseg(&["infer", "--config", &cfg, "--split", "train", "--out", &s(&plain)]).unwrap();

    let text = std::fs::read_to_string(&cfg_path).unwrap();
    let mut doc: toml::Table = text.parse().unwrap();
    let crf = doc.get_mut("crf").unwrap().as_table_mut().unwrap();
    crf.insert("w_appearance".into(), 0.0.into());
    crf.insert("w_smooth".into(), 0.0.into());
    crf.insert("iterations".into(), 1.into());
    let zero_cfg = root.join("zero.toml");
    std::fs::write(&zero_cfg, toml::to_string(&doc).unwrap()).unwrap();
    let refined = root.join("refined");
    lseg(&["infer", "--config", &s(&zero_cfg), "--split", "train", "--crf", "--out", &s(&refined)]).unwrap();

    let names: Vec<_> = std::fs::read_dir(plain.join("masks")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(!names.is_empty());
    for n in names {
        let a = std::fs::read(plain.join("masks").join(&n)).unwrap();
        let b = std::fs::read(refined.join("masks").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?}");
    }
}

#[test]
fn evaluate_ground_truth_against_itself() {
    let root = prepared();
    let out = tempfile::tempdir().unwrap();
    let gt = s(&root.join("gt"));
    lseg(&["evaluate", "--pred", &gt, "--gt", &gt, "--out", &s(out.path())]).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["cases"], 12);
    assert_eq!(summary["dice"]["mean"], 1.0);
    assert_eq!(summary["avd"]["mean"], 0.0);
    let table = std::fs::read_to_string(out.path().join("table.txt")).unwrap();
    assert!(table.contains("1.000 ± 0.00"), "{table}");
}

#[test]
fn evaluate_flags_predictions_without_ground_truth() {
    let root = prepared();
    let pred = tempfile::tempdir().unwrap();
    copy_tree(&root.join("gt"), pred.path());
    std::fs::copy(root.join("gt/L0000.png"), pred.path().join("X9999.png")).unwrap();
    let out = tempfile::tempdir().unwrap();
    let err = lseg(&["evaluate", "--pred", &s(pred.path()), "--gt", &s(&root.join("gt")), "--out", &s(out.path())])
        .unwrap_err();
    assert_eq!(exit_code(&err), EXIT_DATA);
    assert!(format!("{err:#}").contains("X9999"), "{err:#}");
    assert!(out.path().join("report.csv").exists());
}

#[test]
fn overlay_is_reproducible() {
    let root = prepared();
    let out = tempfile::tempdir().unwrap();
    let args = |o: &Path| {
        vec![
            "overlay".to_string(),
            "--image".into(),
            s(&root.join("images/L0001.png")),
            "--pred".into(),
            s(&root.join("work/masks/L0001.png")),
            "--gt".into(),
            s(&root.join("gt/L0001.png")),
            "--out".into(),
            s(o),
        ]
    };
    let (a, b) = (out.path().join("a.png"), out.path().join("b.png"));
    for p in [&a, &b] {
        let v = args(p);
        lseg(&v.iter().map(String::as_str).collect::<Vec<_>>()).unwrap();
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nepochs = \"two\"\n").unwrap();
    let err = lseg(&["train", "--config", &s(&bad)]).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);

    let err = lseg(&["train", "--no-such-flag"]).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);

    let err = lseg(&["overlay", "--image", "x.png", "--out", "y.png", "--window", "5,1"]).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
}

#[test]
fn train_without_masks_points_at_gen_masks() {
    let dir = tempfile::tempdir().unwrap();
    lseg(&["phantom", "--out", &s(dir.path()), "--count", "4", "--clusters", "1"]).unwrap();
    let err = lseg(&["train", "--config", &s(&dir.path().join("pipeline.toml"))]).unwrap_err();
    assert!(format!("{err:#}").contains("gen-masks"), "{err:#}");
}
