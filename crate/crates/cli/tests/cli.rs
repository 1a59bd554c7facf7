use std::path::Path;
use std::process::{Command, Output};

fn rfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfp"))
        .args(args)
        .env("RFP_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

const TINY: [&str; 16] = [
    "--set",
    "train.steps=2",
    "--set",
    "train.batch=2",
    "--set",
    "data.train_images=4",
    "--set",
    "data.test_images=2",
    "--set",
    "data.scene.height=64",
    "--set",
    "data.scene.width=64",
    "--set",
    "data.scene.max_size=32",
    "--set",
    "fpn.out_channels=8",
];

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let report = format!("report.dir={:?}", dir.display().to_string());
    let mut args = vec!["train"];
    args.extend(TINY);
    args.extend(["--set", &report]);
    args.extend(extra);
    rfp(&args)
}

#[test]
fn resnet50_cost_table() {
    let o = rfp(&["cost", "--preset", "resnet50"]);
    assert!(o.status.success(), "{}", text(&o));
    let t = text(&o);
    assert!(t.contains("31532230"), "{t}");
    assert!(t.contains("not a multiple"), "{t}");
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let o = rfp(&["cost", "--set", "rfp.branchez=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("branchez"));
}

#[test]
fn missing_file_exits_4() {
    let o = rfp(&["eval", "--checkpoint", "/nonexistent/x.ckpt"]);
    assert_eq!(o.status.code(), Some(4), "{}", text(&o));
}

#[test]
fn ablation_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rfp(&["ablate", "--axis", "fusion", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    let files: Vec<_> = std::fs::read_dir(tmp.path()).unwrap().collect();
    assert!(!files.is_empty());
}

#[test]
fn train_fold_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train_tiny(tmp.path(), &[]);
    assert!(o.status.success(), "{}", text(&o));
    let ckpt = tmp.path().join("checkpoint.ckpt");
    let folded = tmp.path().join("folded.ckpt");
    let o = rfp(&[
        "fold",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        folded.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let eval_dir = tmp.path().join("eval");
    let o = rfp(&[
        "eval",
        "--checkpoint",
        folded.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(eval_dir.join("pr_curve.csv").exists());

    // architecture changes through --set are refused with both hashes
    let o = rfp(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--set",
        "rfp.branches=2",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).matches("arch hash").count() >= 1, "{}", text(&o));
}

#[test]
fn fold_of_add_model_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let o = train_tiny(tmp.path(), &["--set", "rfp.fusion=\"add\"", "--set", "train.steps=0"]);
    assert!(o.status.success(), "{}", text(&o));
    let o = rfp(&[
        "fold",
        "--checkpoint",
        tmp.path().join("checkpoint.ckpt").to_str().unwrap(),
        "--out",
        tmp.path().join("f.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("add"));
}

#[test]
fn gradcheck_passes() {
    let o = rfp(&["gradcheck", "--seeds", "2"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(!text(&o).contains("FAIL"));
}

#[test]
fn datagen_writes_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["datagen", "--out", tmp.path().to_str().unwrap()];
    args.extend(TINY);
    let o = rfp(&args);
    assert!(o.status.success(), "{}", text(&o));
    assert!(tmp.path().join("train").is_dir() && tmp.path().join("test").is_dir());
}
