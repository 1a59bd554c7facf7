//! `rfp`: cost tables, ablations, gradient checks, training, evaluation,
//! folding and dataset generation.
//!
//! Exit codes: 0 success, 2 configuration error, 3 contract or invariant
//! violation (including a failed gradient check), 4 I/O or parse error.
//! `RFP_NUM_THREADS` caps the worker threads; results do not depend on it.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rfp_core::config::{ExperimentConfig, CODE_VERSION};
use rfp_core::cost::{self, AblationAxis};
use rfp_core::experiment;
use rfp_core::gradcheck::{check_model, check_ops, GradCheckSettings};
use rfp_core::model::{DetectorConfig, RfpOverride};
use rfp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rfp", version, about = "Receptive field pyramid detector toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply to every missing key.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set rfp.branches=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        match &self.config {
            Some(p) => ExperimentConfig::load(p, &self.set),
            None => ExperimentConfig::from_toml_with("", &self.set),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// ResNet-50, 256-channel P2–P7 pyramid, RFP, 960x1024 input.
    Resnet50,
    /// The configured (or default) desk-scale model.
    Desk,
}

#[derive(Args)]
struct ModelArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Model to cost; `desk` takes the architecture from the config.
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Input size HxW (default: 960x1024 for the resnet50 preset, the scene size otherwise).
    #[arg(long, value_parser = parse_hw)]
    input: Option<(usize, usize)>,
}

impl ModelArgs {
    fn resolve(&self) -> Result<(DetectorConfig, (usize, usize), String)> {
        let cfg = self.config.load()?;
        let (det, hw, label) = match self.preset {
            Preset::Resnet50 => (
                cost::resnet50_preset(),
                cost::RESNET50_INPUT,
                "preset: resnet50".to_string(),
            ),
            Preset::Desk => (
                cfg.detector()?,
                (cfg.data.scene.height, cfg.data.scene.width),
                format!("config_hash: {}", cfg.config_hash()),
            ),
        };
        let hw = self.input.unwrap_or(hw);
        let m = det.fpn.input_multiple();
        if !hw.0.is_multiple_of(m) || !hw.1.is_multiple_of(m) {
            log::warn!(
                "input {}x{} is not a multiple of {m}; level sizes follow the per-layer conv output formula, not input/stride",
                hw.0,
                hw.1
            );
        }
        Ok((det, hw, label))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Branches,
    Sharing,
    Fusion,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter and MAC/FLOP totals, plus the branch sweep.
    Cost {
        #[command(flatten)]
        model: ModelArgs,
        /// Cost a layer graph file instead of a detector.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Print every layer.
        #[arg(long)]
        layers: bool,
    },
    /// Cost sweeps over branches, sharing and fusion, or (--train) the fusion study.
    Ablate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_enum, default_value = "all")]
        axis: AxisArg,
        /// Directory for CSV output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train 1-branch, 3-branch pool and 3-branch add detectors per seed and compare.
        #[arg(long)]
        train: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Branch kept for single-branch inference (1-based).
        #[arg(long, default_value_t = 2)]
        branch: usize,
    },
    /// Train a detector into report.dir.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: AP@0.5, PR curve, detections.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides applied to the stored config (data keys only; the architecture must match).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (default: the stored report.dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run only this RFP branch, whatever the fusion (diagnostic).
        #[arg(long)]
        force_branch: Option<usize>,
    },
    /// Rewrite a checkpoint for single-branch inference.
    Fold {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1-based branch (default: the middle one).
        #[arg(long)]
        branch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every op and of a narrow full detector.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Channel width of the detector under test.
        #[arg(long, default_value_t = 4)]
        width: usize,
        /// Input side of the detector under test.
        #[arg(long, default_value_t = 16)]
        size: usize,
    },
    /// Write the synthetic train/test splits to disk.
    Datagen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (h, w) = (p(h)?, p(w)?);
    if h == 0 || w == 0 {
        return Err("input sides must be positive".into());
    }
    Ok((h, w))
}

fn write_out(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = rfp_core::data::output_path(dir, name)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn print_report(rep: &cost::CostReport, layers: bool) {
    let text = rep.to_text();
    if layers {
        print!("{text}");
    } else if let Some(total) = text.lines().last() {
        println!("{total}");
    }
}

fn axes(a: AxisArg) -> Vec<AblationAxis> {
    match a {
        AxisArg::Branches => vec![AblationAxis::Branches],
        AxisArg::Sharing => vec![AblationAxis::Sharing],
        AxisArg::Fusion => vec![AblationAxis::Fusion],
        AxisArg::All => vec![AblationAxis::Branches, AblationAxis::Sharing, AblationAxis::Fusion],
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Cost { model, graph, layers } => {
            if let Some(g) = graph {
                let text = fs::read_to_string(&g).map_err(|e| Error::io(&g, e))?;
                let (ls, hw) = cost::parse_graph(&text, model.input)?;
                let rep = cost::count(&ls, hw)?;
                print_report(&rep, layers);
                return Ok(());
            }
            let (det, hw, label) = model.resolve()?;
            let rep = cost::count_detector(&det, hw)?;
            println!("# {CODE_VERSION}\n# {label}");
            print_report(&rep, layers);
            if det.rfp.is_some() {
                print!("{}", cost::ablation_table(&det, AblationAxis::Branches, hw)?.to_text());
            }
            Ok(())
        }
        Command::Ablate {
            model,
            axis,
            out,
            train,
            seeds,
            branch,
        } => {
            if train {
                let cfg = model.config.load()?;
                eprintln!(
                    "fusion study: seeds {seeds:?}, 3 trainings per seed, {} steps each",
                    cfg.train.steps
                );
                let rep = experiment::fusion_study(&cfg, &seeds, branch, |s| {
                    eprintln!(
                        "seed {}: b1 {:.4}  pool {:.4}  pool single({branch}) {:.4}  add {:.4}  add single({branch}) {:.4}",
                        s.seed, s.ap_single_baseline, s.ap_pool_all, s.ap_pool_folded, s.ap_add_all, s.ap_add_single
                    )
                })?;
                let csv = rep.to_csv();
                print!("{csv}");
                if let Some(dir) = out {
                    let header: String = cfg
                        .reproducibility_header()
                        .lines()
                        .map(|l| format!("# {l}\n"))
                        .collect();
                    write_out(&dir, "fusion_study.csv", &format!("{header}{csv}"))?;
                }
                return Ok(());
            }
            let (det, hw, label) = model.resolve()?;
            let det = if det.rfp.is_none() {
                DetectorConfig {
                    rfp: Some(rfp_core::rfp::RfpConfig::new(det.fpn.out_channels)),
                    ..det
                }
            } else {
                det
            };
            for a in axes(axis) {
                let t = cost::ablation_table(&det, a, hw)?;
                print!("{}", t.to_text());
                if let Some(dir) = &out {
                    let name = format!("ablation_{}.csv", format!("{a:?}").to_lowercase());
                    write_out(dir, &name, &format!("# {CODE_VERSION}\n# {label}\n{}", t.to_csv()))?;
                }
            }
            Ok(())
        }
        Command::Train { config, resume } => {
            let cfg = config.load()?;
            let o = experiment::train(&cfg, resume.as_deref(), |_| {})?;
            println!("checkpoint: {}", o.checkpoint.display());
            if let Some(m) = o.metrics {
                println!(
                    "AP@{} = {:.4} ({} images, {} faces)",
                    m.iou_threshold, m.ap, m.num_images, m.num_gt
                );
            }
            Ok(())
        }
        Command::Eval {
            checkpoint,
            set,
            out,
            force_branch,
        } => {
            let out = match out {
                Some(o) => o,
                None => PathBuf::from(experiment::open_checkpoint(&checkpoint, &set)?.1.report.dir),
            };
            let ov = force_branch.map_or(RfpOverride::None, RfpOverride::ForceBranch);
            let (m, _) = experiment::evaluate_checkpoint(&checkpoint, &set, ov, &out)?;
            println!(
                "AP@{} = {:.4}  ({} images, {} faces, {} detections, {} true positives, rfp {})",
                m.iou_threshold, m.ap, m.num_images, m.num_gt, m.num_detections, m.true_positives, m.rfp_inference
            );
            println!("wrote {}", out.join("pr_curve.csv").display());
            Ok(())
        }
        Command::Fold {
            checkpoint,
            branch,
            out,
        } => {
            let f = experiment::fold_checkpoint(&checkpoint, branch, &out)?;
            println!(
                "folded to branch {}: {} -> {} MACs per {}x{} image (ratio {:.4}); wrote {}",
                f.branch,
                f.macs_before,
                f.macs_after,
                f.input_hw.0,
                f.input_hw.1,
                f.ratio(),
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck { seeds, width, size } => {
            let mut ok = true;
            for r in check_ops(0..seeds, &GradCheckSettings::ops())? {
                println!("{r}");
                ok &= r.passed();
            }
            let r = check_model(0..seeds, width, (size, size), 8, &GradCheckSettings::model())?;
            println!("{r}");
            ok &= r.passed();
            if ok {
                Ok(())
            } else {
                Err(Error::invariant("gradient check failed"))
            }
        }
        Command::Datagen { config, out } => {
            let cfg = config.load()?;
            let (n_train, n_test) = experiment::datagen(&cfg, &out)?;
            println!(
                "wrote {n_train} training and {n_test} test images under {}",
                out.display()
            );
            Ok(())
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RFP_NUM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("RFP_NUM_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
