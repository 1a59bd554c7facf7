use std::fs;
use std::path::Path;

use rfp_core::config::ExperimentConfig;
use rfp_core::experiment::{evaluate_checkpoint, fold_checkpoint, open_checkpoint, train};
use rfp_core::model::RfpOverride;
use rfp_core::rfp::InferenceMode;
use rfp_core::tensor::read_checkpoint;
use rfp_core::Error;

fn tiny(dir: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "train.steps=6",
        "train.batch=2",
        "train.warmup=2",
        "data.train_images=6",
        "data.test_images=3",
        "data.scene.height=64",
        "data.scene.width=64",
        "data.scene.max_size=32",
        "fpn.out_channels=8",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    o.push(format!("report.dir={:?}", dir.display().to_string()));
    ExperimentConfig::from_toml_with("", &o).unwrap()
}

fn log_rows(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("train_log.csv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(String::from)
        .collect()
}

#[test]
fn identical_runs_are_bitwise_identical() {
    // The stored config includes the output directory, so both runs share one.
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let files = [
        "checkpoint.ckpt",
        "metrics.toml",
        "detections.txt",
        "pr_curve.csv",
        "train_log.csv",
    ];
    let ra = train(&tiny(&dir, &[]), None, |_| {}).unwrap();
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(dir.join(f)).unwrap()).collect();
    fs::remove_dir_all(&dir).unwrap();
    let rb = train(&tiny(&dir, &[]), None, |_| {}).unwrap();
    assert_eq!(ra.metrics, rb.metrics);
    for (f, bytes) in files.iter().zip(first) {
        assert!(fs::read(dir.join(f)).unwrap() == bytes, "{f} differs");
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    let r_full = train(&tiny(&full, &[]), None, |_| {}).unwrap();
    train(&tiny(&part, &["train.checkpoint_every=3"]), None, |_| {}).unwrap();
    // Restart from the mid-run checkpoint in a fresh directory holding the truncated log.
    let resumed_dir = tmp.path().join("resumed");
    fs::create_dir_all(&resumed_dir).unwrap();
    fs::copy(part.join("train_log.csv"), resumed_dir.join("train_log.csv")).unwrap();
    let mut steps = Vec::new();
    let r = train(
        &tiny(&resumed_dir, &[]),
        Some(&part.join("checkpoint_step3.ckpt")),
        |s| steps.push(s.step),
    )
    .unwrap();
    assert_eq!(steps, vec![4, 5, 6]);
    assert_eq!(
        read_checkpoint(&r.checkpoint).unwrap().entries,
        read_checkpoint(&r_full.checkpoint).unwrap().entries
    );
    assert_eq!(r.metrics, r_full.metrics);
    assert_eq!(log_rows(&resumed_dir), log_rows(&full));
}

#[test]
fn zero_steps_still_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let r = train(&tiny(tmp.path(), &["train.steps=0"]), None, |_| {}).unwrap();
    let m = r.metrics.unwrap();
    assert_eq!(m.step, 0);
    assert_eq!(m.num_images, 3);
    assert!((0.0..=1.0).contains(&m.ap));
    for f in ["metrics.toml", "pr_curve.csv", "detections.txt", "checkpoint.ckpt"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
}

#[test]
fn fold_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let r = train(&tiny(tmp.path(), &[]), None, |_| {}).unwrap();
    let folded = tmp.path().join("folded.ckpt");
    let out = fold_checkpoint(&r.checkpoint, None, &folded).unwrap();
    assert_eq!(out.branch, 2);
    assert!(out.macs_after < out.macs_before);
    let (_, cfg) = open_checkpoint(&folded, &[]).unwrap();
    assert_eq!(cfg.rfp.inference, InferenceMode::Single(2));
    let (m, _) = evaluate_checkpoint(&folded, &[], RfpOverride::None, &tmp.path().join("eval")).unwrap();
    assert_eq!(m.rfp_inference, "single(2)");
    // folding on the middle branch equals forcing it on the unfolded model
    let (forced, _) = evaluate_checkpoint(
        &r.checkpoint,
        &[],
        RfpOverride::ForceBranch(2),
        &tmp.path().join("forced"),
    )
    .unwrap();
    assert_eq!(forced.ap, m.ap);
}

#[test]
fn fold_refused_for_add_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let r = train(
        &tiny(tmp.path(), &["train.steps=0", "rfp.fusion=\"add\""]),
        None,
        |_| {},
    )
    .unwrap();
    let err = fold_checkpoint(&r.checkpoint, Some(2), &tmp.path().join("x.ckpt")).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert!(!tmp.path().join("x.ckpt").exists());
}

#[test]
fn architecture_mismatch_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let r = train(&tiny(tmp.path(), &["train.steps=0"]), None, |_| {}).unwrap();
    let stored = hex::encode(read_checkpoint(&r.checkpoint).unwrap().arch_hash);

    let err = open_checkpoint(&r.checkpoint, &["rfp.branches=2".into()]).unwrap_err();
    assert!(err.to_string().contains(&stored), "{err}");

    let other = tiny(&tmp.path().join("other"), &["rfp.share_weights=false"]);
    let err = train(&other, Some(&r.checkpoint), |_| {}).unwrap_err();
    let msg = err.to_string();
    assert!(
        msg.contains(&stored) && msg.contains(&hex::encode(other.arch_hash())),
        "{msg}"
    );

    // non-architectural overrides are fine
    open_checkpoint(&r.checkpoint, &["data.test_images=2".into()]).unwrap();
}
