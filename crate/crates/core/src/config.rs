//! Experiment configuration.
//!
//! The file is TOML. Every setting has a flat dotted key (`rfp.branches`,
//! `train.lr`, …): the part before the first dot is the section. Unknown keys
//! are errors. Any key can be overridden from the command line with
//! `key=value`, where `value` is a TOML literal (`rfp.fusion="add"`,
//! `rfp.dilations=[1,3]`); bare words are taken as strings.
//!
//! ```toml
//! [model]
//! precision = "f64"      # or "f32"
//! seed = 1               # parameter initialisation
//!
//! [backbone]
//! kind = "stub"          # "resnet50" is accepted by `cost` only
//! in_channels = 1
//! stem_channels = 8
//! stage_channels = [16, 32, 32, 32]
//! blocks = [1, 1, 1, 1]
//!
//! [fpn]
//! out_channels = 16
//! levels = 6
//!
//! [rfp]
//! enabled = true
//! branches = 3
//! dilations = [1, 3, 5]  # default 1, 3, 5, … for `branches`
//! share_weights = true
//! fusion = "branch_pool" # add | concat
//! inference = "all"      # or "single:2"
//! use_bias = false
//! post_relu = false
//!
//! [head]                 # anchors, matching, loss and post-processing
//! [train]                # optimiser and schedule
//! [data]                 # synthetic scenes or a dataset directory
//! [report]               # output directory
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::model::{DetectorConfig, HeadConfig};
use crate::pyramid::{BackboneKind, BackboneSpec, PyramidSpec};
use crate::rfp::{default_dilations, Fusion, InferenceMode, RfpConfig, RFP_KERNEL};

pub const CODE_VERSION: &str = concat!("rfp-core ", env!("CARGO_PKG_VERSION"));

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            precision: Precision::F64,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub kind: BackboneKind,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks: [usize; 4],
}

impl Default for BackboneSection {
    fn default() -> Self {
        let d = BackboneSpec::desk(1);
        BackboneSection {
            kind: d.kind,
            in_channels: d.in_channels,
            stem_channels: d.stem_channels,
            stage_channels: d.stage_channels,
            blocks: d.blocks_per_stage,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpnSection {
    pub out_channels: usize,
    pub levels: usize,
}

impl Default for FpnSection {
    fn default() -> Self {
        FpnSection {
            out_channels: 16,
            levels: 6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RfpSection {
    pub enabled: bool,
    pub branches: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dilations: Option<Vec<usize>>,
    pub share_weights: bool,
    pub fusion: Fusion,
    pub inference: InferenceMode,
    pub use_bias: bool,
    pub post_relu: bool,
}

impl Default for RfpSection {
    fn default() -> Self {
        RfpSection {
            enabled: true,
            branches: 3,
            dilations: None,
            share_weights: true,
            fusion: Fusion::BranchPool,
            inference: InferenceMode::AllBranches,
            use_bias: false,
            post_relu: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Optimiser steps.
    pub steps: u64,
    pub batch: usize,
    /// Drives batch order and augmentation.
    pub seed: u64,
    /// Linear learning-rate warm-up length in steps.
    pub warmup: u64,
    /// Fractions of `steps` after which the learning rate drops tenfold.
    pub decay_at: Vec<f64>,
    /// Gradient global-norm clip; 0 disables.
    pub clip_norm: f64,
    pub hflip: bool,
    /// Largest random translation in pixels (pad-and-crop); 0 disables.
    pub max_shift: usize,
    pub log_every: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            steps: 1000,
            batch: 8,
            seed: 1,
            warmup: 50,
            decay_at: vec![0.75],
            clip_norm: 10.0,
            hflip: true,
            max_shift: 0,
            log_every: 25,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory to train on instead of synthetic scenes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_dir: Option<String>,
    pub train_images: usize,
    pub test_images: usize,
    /// Index of the first synthetic test image; test scenes never overlap training scenes.
    pub test_offset: usize,
    pub scene: SceneSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_dir: None,
            test_dir: None,
            train_images: 500,
            test_images: 200,
            test_offset: 1_000_000,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportSection {
    pub dir: String,
}

impl Default for ReportSection {
    fn default() -> Self {
        ReportSection {
            dir: "runs/default".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub backbone: BackboneSection,
    pub fpn: FpnSection,
    pub rfp: RfpSection,
    pub head: HeadConfig,
    pub train: TrainSection,
    pub data: DataSection,
    pub report: ReportSection,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Set `key` (dotted) in `table` to the TOML literal `value`.
fn apply_override(table: &mut toml::Table, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("just inserted"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::config(format!("empty key in `{key}`")))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("`{key}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text, apply `key=value` overrides, and validate.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{o}` is not key=value")))?;
            apply_override(&mut table, k.trim(), v.trim())?;
        }
        let text = toml::to_string(&table).map_err(|e| Error::config(format!("config: {e}")))?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    /// The resolved configuration, verbatim.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.detector()?.validate()?;
        self.data.scene.validate()?;
        if self.data.scene.channels != self.backbone.in_channels {
            return Err(Error::config(format!(
                "data.scene.channels = {} but backbone.in_channels = {}",
                self.data.scene.channels, self.backbone.in_channels
            )));
        }
        let t = &self.train;
        if t.batch == 0 {
            return Err(Error::config("train.batch must be >= 1"));
        }
        if !(t.lr >= 0.0 && (0.0..1.0).contains(&t.momentum) && t.weight_decay >= 0.0 && t.clip_norm >= 0.0) {
            return Err(Error::config(
                "train: need lr >= 0, 0 <= momentum < 1, weight_decay >= 0, clip_norm >= 0",
            ));
        }
        if t.decay_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("train.decay_at entries must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn rfp_config(&self) -> Option<RfpConfig> {
        let r = &self.rfp;
        r.enabled.then(|| RfpConfig {
            branches: r.branches,
            dilations: r.dilations.clone().unwrap_or_else(|| default_dilations(r.branches)),
            share_weights: r.share_weights,
            fusion: r.fusion,
            inference: r.inference,
            channels: self.fpn.out_channels,
            kernel: RFP_KERNEL,
            use_bias: r.use_bias,
            post_relu: r.post_relu,
        })
    }

    pub fn detector(&self) -> Result<DetectorConfig> {
        let b = &self.backbone;
        let cfg = DetectorConfig {
            backbone: BackboneSpec {
                kind: b.kind,
                in_channels: b.in_channels,
                stem_channels: b.stem_channels,
                stage_channels: b.stage_channels,
                blocks_per_stage: b.blocks,
            },
            fpn: PyramidSpec {
                out_channels: self.fpn.out_channels,
                levels: self.fpn.levels,
            },
            rfp: self.rfp_config(),
            head: self.head.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the resolved configuration.
    pub fn config_hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    /// SHA-256 of everything that determines parameter shapes and how they are
    /// combined. The inference mode is excluded, so folding keeps the hash.
    pub fn arch_hash(&self) -> [u8; 32] {
        let mut rfp = self.rfp.clone();
        rfp.inference = InferenceMode::AllBranches;
        rfp.dilations = self.rfp_config().map(|r| r.dilations);
        #[derive(Serialize)]
        struct Arch<'a> {
            backbone: &'a BackboneSection,
            fpn: &'a FpnSection,
            rfp: RfpSection,
            hidden_convs: usize,
        }
        let arch = Arch {
            backbone: &self.backbone,
            fpn: &self.fpn,
            rfp,
            hidden_convs: self.head.hidden_convs,
        };
        Sha256::digest(toml::to_string(&arch).expect("arch serialises").as_bytes()).into()
    }

    /// Lines embedded at the top of every artifact.
    pub fn reproducibility_header(&self) -> String {
        format!(
            "code_version: {CODE_VERSION}\nconfig_hash: {}\narch_hash: {}\n--- config ---\n{}",
            self.config_hash(),
            hex::encode(self.arch_hash()),
            self.to_toml()
        )
    }
}
