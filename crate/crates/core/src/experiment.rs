//! File-level workflows behind the command line: dataset generation, training
//! with checkpoints and resume, evaluation, folding, and the fusion study.
//!
//! A run directory (`report.dir`) holds:
//!
//! ```text
//! train_log.csv           step,lr,loss,cls,reg,grad_norm,num_pos
//! checkpoint.ckpt         final weights
//! checkpoint_stepN.ckpt   periodic weights (train.checkpoint_every)
//! metrics.toml            AP and counts from the last evaluation
//! pr_curve.csv            recall,precision
//! detections.txt          block-format detections on the test set
//! ```
//!
//! Every text artifact starts with `# `-prefixed reproducibility lines. Nothing
//! written to these files depends on wall-clock time or thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, Precision};
use crate::data::{generate_dataset, output_path, read_dataset, write_dataset, write_detections, Sample};
use crate::detect::{evaluate_ap, write_pr_csv, ApReport, AP_IOU};
use crate::error::{Error, Result};
use crate::model::{Detector, RfpOverride};
use crate::rfp::{Fusion, InferenceMode};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Real};
use crate::train::{detect_all, ground_truth, train_steps, StepRecord};

/// Run `$body` with `$T` bound to the configured float type.
macro_rules! with_precision {
    ($prec:expr, $T:ident => $body:expr) => {
        match $prec {
            Precision::F64 => {
                type $T = f64;
                $body
            }
            Precision::F32 => {
                type $T = f32;
                $body
            }
        }
    };
}

fn commented(header: &str) -> String {
    header.lines().map(|l| format!("# {l}\n")).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_samples(samples: &[Sample], cfg: &ExperimentConfig, what: &str) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::config(format!("{what} set is empty")));
    }
    if let Some(s) = samples.iter().find(|s| s.channels != cfg.backbone.in_channels) {
        return Err(Error::config(format!(
            "{what} image has {} channels, backbone.in_channels = {}",
            s.channels, cfg.backbone.in_channels
        )));
    }
    Ok(())
}

/// Training and test samples: read from `data.*_dir` when set, generated otherwise.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.data;
    let train = match &d.train_dir {
        Some(dir) => read_dataset(Path::new(dir))?,
        None => generate_dataset(&d.scene, 0, d.train_images)?,
    };
    let test = load_test_set(cfg)?;
    check_samples(&train, cfg, "training")?;
    Ok((train, test))
}

pub fn load_test_set(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    let d = &cfg.data;
    let test = match &d.test_dir {
        Some(dir) => read_dataset(Path::new(dir))?,
        None => generate_dataset(&d.scene, d.test_offset, d.test_images)?,
    };
    check_samples(&test, cfg, "test")?;
    Ok(test)
}

/// Write the synthetic training and test splits under `out/train` and `out/test`.
pub fn datagen(cfg: &ExperimentConfig, out: &Path) -> Result<(usize, usize)> {
    let d = &cfg.data;
    let header = format!(
        "synthetic faces\nscene: {}\n{}",
        toml::to_string(&d.scene)
            .expect("scene serialises")
            .trim()
            .replace('\n', ", "),
        cfg.reproducibility_header()
    );
    let train = generate_dataset(&d.scene, 0, d.train_images)?;
    write_dataset(
        &out.join("train"),
        &train,
        &format!("split: train (indices 0..{})\n{header}", d.train_images),
    )?;
    let test = generate_dataset(&d.scene, d.test_offset, d.test_images)?;
    write_dataset(
        &out.join("test"),
        &test,
        &format!(
            "split: test (indices {}..{})\n{header}",
            d.test_offset,
            d.test_offset + d.test_images
        ),
    )?;
    Ok((train.len(), test.len()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub ap: f64,
    pub num_images: usize,
    pub num_gt: usize,
    pub num_detections: usize,
    pub true_positives: usize,
    pub iou_threshold: f64,
    pub rfp_inference: String,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last: Option<StepRecord>,
    pub checkpoint: PathBuf,
    pub metrics: Option<EvalMetrics>,
}

fn inference_label(cfg: &ExperimentConfig, ov: RfpOverride) -> String {
    if !cfg.rfp.enabled {
        return "none".into();
    }
    match (ov, cfg.rfp.inference) {
        (RfpOverride::ForceBranch(b), _) => format!("forced_branch({b})"),
        (_, InferenceMode::Single(b)) => format!("single({b})"),
        (_, InferenceMode::AllBranches) => "all".into(),
    }
}

fn checkpoint_of<T: Real>(det: &Detector<T>, cfg: &ExperimentConfig, step: u64) -> Checkpoint {
    Checkpoint::from_store(&det.store, cfg.to_toml(), cfg.arch_hash(), step)
}

/// Load a checkpoint and the configuration stored in it, with `overrides` applied.
/// Overrides may not change the architecture.
pub fn open_checkpoint(path: &Path, overrides: &[String]) -> Result<(Checkpoint, ExperimentConfig)> {
    let ckpt = read_checkpoint(path)?;
    let cfg = ExperimentConfig::from_toml_with(&ckpt.config, overrides)?;
    if cfg.arch_hash() != ckpt.arch_hash {
        return Err(Error::config(format!(
            "{}: overrides change the architecture (arch hash {} vs stored {})",
            path.display(),
            hex::encode(cfg.arch_hash()),
            hex::encode(ckpt.arch_hash)
        )));
    }
    Ok((ckpt, cfg))
}

fn restore<T: Real>(cfg: &ExperimentConfig, ckpt: &Checkpoint) -> Result<Detector<T>> {
    let mut det = Detector::new(&cfg.detector()?, cfg.model.seed)?;
    ckpt.load_into(&mut det.store)?;
    Ok(det)
}

fn evaluate_to_dir<T: Real>(
    det: &Detector<T>,
    cfg: &ExperimentConfig,
    test: &[Sample],
    ov: RfpOverride,
    step: u64,
    dir: &Path,
) -> Result<(EvalMetrics, ApReport)> {
    let per_image = detect_all(det, test, ov)?;
    let flat: Vec<_> = per_image.iter().flatten().copied().collect();
    let report = evaluate_ap(&flat, &ground_truth(test), AP_IOU)?;
    let metrics = EvalMetrics {
        ap: report.ap,
        num_images: test.len(),
        num_gt: report.num_gt,
        num_detections: report.num_det,
        true_positives: report.true_positives,
        iou_threshold: AP_IOU,
        rfp_inference: inference_label(cfg, ov),
        step,
    };
    let header = cfg.reproducibility_header();
    write_pr_csv(&output_path(dir, "pr_curve.csv")?, &report, &header)?;
    let blocks: Vec<(String, Vec<_>)> = per_image
        .into_iter()
        .enumerate()
        .map(|(i, d)| (format!("test/{i:06}"), d))
        .collect();
    write_detections(&output_path(dir, "detections.txt")?, &blocks)?;
    let body = toml::to_string(&metrics).expect("metrics serialise");
    write_text(
        &output_path(dir, "metrics.toml")?,
        &format!("{}{body}", commented(&header)),
    )?;
    Ok((metrics, report))
}

fn train_generic<T: Real>(
    cfg: &ExperimentConfig,
    resume: Option<&Path>,
    evaluate_after: bool,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let dir = PathBuf::from(&cfg.report.dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (train, test) = load_datasets(cfg)?;

    let mut det: Detector<T> = Detector::new(&cfg.detector()?, cfg.model.seed)?;
    let mut start = 0;
    if let Some(path) = resume {
        let ckpt = read_checkpoint(path)?;
        if ckpt.arch_hash != cfg.arch_hash() {
            return Err(Error::config(format!(
                "{} was written for a different architecture (checkpoint arch hash {}, config arch hash {})",
                path.display(),
                hex::encode(ckpt.arch_hash),
                hex::encode(cfg.arch_hash())
            )));
        }
        ckpt.load_into(&mut det.store)?;
        start = ckpt.step;
        if start > cfg.train.steps {
            return Err(Error::config(format!(
                "checkpoint is at step {start}, beyond train.steps = {}",
                cfg.train.steps
            )));
        }
    }

    let log_path = dir.join("train_log.csv");
    let mut log = if start > 0 && log_path.exists() {
        // Keep rows up to the checkpoint so the log matches an uninterrupted run.
        let text = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let kept: String = text
            .lines()
            .filter(|l| {
                l.starts_with('#')
                    || l.starts_with("step")
                    || l.split(',')
                        .next()
                        .and_then(|s| s.parse::<u64>().ok())
                        .is_some_and(|s| s <= start)
            })
            .map(|l| format!("{l}\n"))
            .collect();
        kept
    } else {
        format!(
            "{}step,lr,loss,cls,reg,grad_norm,num_pos\n",
            commented(&cfg.reproducibility_header())
        )
    };

    let mut last = None;
    let every = cfg.train.checkpoint_every;
    let mut result = train_steps(&mut det, &train, &cfg.train, start, cfg.train.steps, |r, d| {
        let _ = writeln!(
            log,
            "{},{},{},{},{},{},{}",
            r.step, r.lr, r.loss, r.cls, r.reg, r.grad_norm, r.num_pos
        );
        if cfg.train.log_every > 0 && r.step % cfg.train.log_every == 0 {
            log::info!(
                "step {:>6}  lr {:.2e}  loss {:.4}  cls {:.4}  reg {:.4}  |g| {:.3}",
                r.step,
                r.lr,
                r.loss,
                r.cls,
                r.reg,
                r.grad_norm
            );
        }
        progress(r);
        last = Some(*r);
        if every > 0 && r.step % every == 0 {
            write_checkpoint(
                &dir.join(format!("checkpoint_step{}.ckpt", r.step)),
                &checkpoint_of(d, cfg, r.step),
            )?;
        }
        Ok(())
    });
    // The log is flushed even if training stopped early.
    let log_written = write_text(&log_path, &log);
    result = result.and(log_written);
    result?;

    let checkpoint = dir.join("checkpoint.ckpt");
    write_checkpoint(&checkpoint, &checkpoint_of(&det, cfg, cfg.train.steps))?;
    let metrics = if evaluate_after {
        Some(evaluate_to_dir(&det, cfg, &test, RfpOverride::None, cfg.train.steps, &dir)?.0)
    } else {
        None
    };
    Ok(TrainOutcome {
        steps: cfg.train.steps,
        last,
        checkpoint,
        metrics,
    })
}

/// Train per `cfg` into `report.dir`, optionally resuming from a checkpoint,
/// then evaluate on the test split.
pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>, progress: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    with_precision!(cfg.model.precision, T => train_generic::<T>(cfg, resume, true, progress))
}

/// Evaluate a checkpoint on its test split (or `overrides`' data), writing
/// metrics, PR curve and detections to `out_dir`.
pub fn evaluate_checkpoint(
    path: &Path,
    overrides: &[String],
    ov: RfpOverride,
    out_dir: &Path,
) -> Result<(EvalMetrics, ApReport)> {
    let (ckpt, cfg) = open_checkpoint(path, overrides)?;
    let test = load_test_set(&cfg)?;
    with_precision!(cfg.model.precision, T => {
        let det: Detector<T> = restore(&cfg, &ckpt)?;
        evaluate_to_dir(&det, &cfg, &test, ov, ckpt.step, out_dir)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldOutcome {
    pub branch: usize,
    pub macs_before: u64,
    pub macs_after: u64,
    pub input_hw: (usize, usize),
}

impl FoldOutcome {
    pub fn ratio(&self) -> f64 {
        self.macs_after as f64 / self.macs_before as f64
    }
}

/// Rewrite a checkpoint for single-branch inference on `branch` (1-based;
/// `None` picks the middle branch). Weights and the arch hash are unchanged.
pub fn fold_checkpoint(input: &Path, branch: Option<usize>, output: &Path) -> Result<FoldOutcome> {
    let (ckpt, mut cfg) = open_checkpoint(input, &[])?;
    let rfp = cfg
        .rfp_config()
        .ok_or_else(|| Error::config("checkpoint has no rfp blocks to fold"))?;
    let branch = branch.unwrap_or_else(|| rfp.default_fold_branch());
    let hw = (cfg.data.scene.height, cfg.data.scene.width);
    let (before, after) = with_precision!(cfg.model.precision, T => {
        let mut det: Detector<T> = restore(&cfg, &ckpt)?;
        let before = det.measure_macs(hw.0, hw.1, RfpOverride::None)?;
        det.fold(branch)?;
        (before, det.measure_macs(hw.0, hw.1, RfpOverride::None)?)
    });
    cfg.rfp.inference = InferenceMode::Single(branch);
    cfg.validate()?;
    let folded = Checkpoint {
        config: cfg.to_toml(),
        ..ckpt
    };
    debug_assert_eq!(folded.arch_hash, cfg.arch_hash());
    write_checkpoint(output, &folded)?;
    Ok(FoldOutcome {
        branch,
        macs_before: before,
        macs_after: after,
        input_hw: hw,
    })
}

/// One seed of the fusion study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudySeed {
    pub seed: u64,
    pub ap_single_baseline: f64,
    pub ap_pool_all: f64,
    pub ap_pool_folded: f64,
    pub ap_add_all: f64,
    pub ap_add_single: f64,
}

impl StudySeed {
    /// B=3 branch pooling matches or beats the one-branch baseline.
    pub fn pool_not_worse(&self) -> bool {
        self.ap_pool_all >= self.ap_single_baseline
    }

    pub fn fold_gap(&self) -> f64 {
        (self.ap_pool_all - self.ap_pool_folded).abs()
    }

    pub fn add_drop(&self) -> f64 {
        self.ap_add_all - self.ap_add_single
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyReport {
    pub branch: usize,
    pub seeds: Vec<StudySeed>,
}

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,baseline_b1,pool_b3,pool_folded,add_b3,add_single,fold_gap,add_drop\n");
        for r in &self.seeds {
            let _ = writeln!(
                s,
                "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.seed,
                r.ap_single_baseline,
                r.ap_pool_all,
                r.ap_pool_folded,
                r.ap_add_all,
                r.ap_add_single,
                r.fold_gap(),
                r.add_drop()
            );
        }
        s
    }
}

fn study_variant(base: &ExperimentConfig, seed: u64, branches: usize, fusion: Fusion) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    cfg.model.seed = seed;
    cfg.train.seed = seed;
    cfg.data.scene.seed = seed;
    cfg.rfp.enabled = true;
    cfg.rfp.branches = branches;
    cfg.rfp.dilations = None;
    cfg.rfp.share_weights = true;
    cfg.rfp.fusion = fusion;
    cfg.rfp.inference = InferenceMode::AllBranches;
    cfg.validate()?;
    Ok(cfg)
}

fn trained<T: Real>(cfg: &ExperimentConfig, train: &[Sample]) -> Result<Detector<T>> {
    let mut det = Detector::new(&cfg.detector()?, cfg.model.seed)?;
    train_steps(&mut det, train, &cfg.train, 0, cfg.train.steps, |_, _| Ok(()))?;
    Ok(det)
}

fn ap<T: Real>(det: &Detector<T>, test: &[Sample], ov: RfpOverride) -> Result<f64> {
    Ok(crate::train::evaluate(det, test, ov)?.ap)
}

fn study_seed<T: Real>(base: &ExperimentConfig, seed: u64, branch: usize) -> Result<StudySeed> {
    let one = study_variant(base, seed, 1, Fusion::BranchPool)?;
    let (train, test) = load_datasets(&one)?;
    let b1: Detector<T> = trained(&one, &train)?;
    let pool_cfg = study_variant(base, seed, 3, Fusion::BranchPool)?;
    let mut pool: Detector<T> = trained(&pool_cfg, &train)?;
    let ap_pool_all = ap(&pool, &test, RfpOverride::None)?;
    pool.fold(branch)?;
    let add: Detector<T> = trained(&study_variant(base, seed, 3, Fusion::Add)?, &train)?;
    Ok(StudySeed {
        seed,
        ap_single_baseline: ap(&b1, &test, RfpOverride::None)?,
        ap_pool_all,
        ap_pool_folded: ap(&pool, &test, RfpOverride::None)?,
        ap_add_all: ap(&add, &test, RfpOverride::None)?,
        ap_add_single: ap(&add, &test, RfpOverride::ForceBranch(branch))?,
    })
}

/// For each seed train three detectors on the same data: one branch, three
/// shared branches with branch pooling, three shared branches with addition.
/// Evaluate pooling with all branches and folded to `branch`, and addition
/// with all branches and with `branch` alone.
pub fn fusion_study(
    base: &ExperimentConfig,
    seeds: &[u64],
    branch: usize,
    mut progress: impl FnMut(&StudySeed),
) -> Result<StudyReport> {
    let mut out = Vec::new();
    for &seed in seeds {
        let r = with_precision!(base.model.precision, T => study_seed::<T>(base, seed, branch)?);
        progress(&r);
        out.push(r);
    }
    Ok(StudyReport { branch, seeds: out })
}
