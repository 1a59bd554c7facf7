//! The full detector: backbone, feature pyramid, optional RFP blocks and a
//! classification/regression head shared by every level.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{
    detection_loss, generate_anchors, match_anchors, postprocess, Anchor, BBox, Detection, LossBreakdown, LossConfig,
    PostprocessConfig, DEFAULT_ANCHOR_SCALE, DEFAULT_NEG_IOU, DEFAULT_POS_IOU,
};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::pyramid::{attach_rfp, pad_to_multiple, Backbone, BackboneSpec, Fpn, PyramidSpec, RfpStack};
use crate::rfp::{fold_for_inference, rfp_forward_forced_branch, RfpConfig};
use crate::tensor::{ConvGeometry, Graph, MacCounter, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Anchor side as a multiple of the level stride.
    pub anchor_scale: f64,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub neg_pos_ratio: usize,
    pub reg_weight: f64,
    /// 3×3 conv + ReLU layers before the predictors.
    pub hidden_convs: usize,
    /// Initial face probability, set through the classifier bias.
    pub prior_prob: f64,
    pub score_threshold: f64,
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        let pp = PostprocessConfig::default();
        HeadConfig {
            anchor_scale: DEFAULT_ANCHOR_SCALE,
            pos_iou: DEFAULT_POS_IOU,
            neg_iou: DEFAULT_NEG_IOU,
            neg_pos_ratio: LossConfig::default().neg_pos_ratio,
            reg_weight: LossConfig::default().reg_weight,
            hidden_convs: 1,
            prior_prob: 0.05,
            score_threshold: pp.score_threshold,
            pre_nms_top_k: pp.pre_nms_top_k,
            nms_iou: pp.nms_iou,
            max_detections: pp.max_detections,
        }
    }
}

impl HeadConfig {
    pub fn loss(&self) -> LossConfig {
        LossConfig {
            neg_pos_ratio: self.neg_pos_ratio,
            reg_weight: self.reg_weight,
        }
    }

    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            score_threshold: self.score_threshold,
            pre_nms_top_k: self.pre_nms_top_k,
            nms_iou: self.nms_iou,
            max_detections: self.max_detections,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.anchor_scale > 0.0) {
            return Err(Error::config("head.anchor_scale must be > 0"));
        }
        if !(0.0 < self.prior_prob && self.prior_prob < 1.0) {
            return Err(Error::config("head.prior_prob must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.neg_iou) || !(0.0..=1.0).contains(&self.pos_iou) || self.neg_iou > self.pos_iou {
            return Err(Error::config("head thresholds need 0 <= neg_iou <= pos_iou <= 1"));
        }
        if self.reg_weight < 0.0 {
            return Err(Error::config("head.reg_weight must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub backbone: BackboneSpec,
    pub fpn: PyramidSpec,
    /// `None` builds the plain pyramid baseline.
    pub rfp: Option<RfpConfig>,
    pub head: HeadConfig,
}

impl DetectorConfig {
    /// Small grayscale model used for the toy experiments.
    pub fn desk(in_channels: usize, width: usize) -> Self {
        DetectorConfig {
            backbone: BackboneSpec::desk(in_channels),
            fpn: PyramidSpec::new(width),
            rfp: Some(RfpConfig::new(width)),
            head: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.fpn.validate()?;
        self.head.validate()?;
        if let Some(r) = &self.rfp {
            r.validate()?;
            if r.channels != self.fpn.out_channels {
                return Err(Error::config(format!(
                    "rfp channels {} differ from fpn.out_channels {}",
                    r.channels, self.fpn.out_channels
                )));
            }
        }
        Ok(())
    }
}

/// How RFP blocks run in one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RfpOverride {
    /// As configured (all branches, or the folded branch).
    #[default]
    None,
    /// Only this 1-based branch, even for fusions that refuse folding.
    ForceBranch(usize),
}

#[derive(Clone, Debug)]
pub struct Head {
    pub hidden: Vec<Conv2d>,
    pub cls: Conv2d,
    pub reg: Conv2d,
}

/// Per-level head outputs: logits `1×2×H×W` (background, face) and deltas `1×4×H×W`.
#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub cls: Vec<Var>,
    pub reg: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Detector<T: Real = f64> {
    pub config: DetectorConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub fpn: Fpn,
    pub rfp: Option<RfpStack>,
    pub head: Head,
}

const SAME3: ConvGeometry = ConvGeometry::new(1, 1, 1);

impl<T: Real> Detector<T> {
    /// Build and initialise every parameter from `seed`. Parameter draws happen
    /// in a fixed order, so equal configs and seeds give identical weights.
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, &config.backbone, &mut rng)?;
        let fpn = Fpn::init(&mut store, &config.backbone, &config.fpn, &mut rng)?;
        let rfp = match &config.rfp {
            Some(cfg) => Some(RfpStack::init(&mut store, cfg, config.fpn.levels, &mut rng)?),
            None => None,
        };
        let c = config.fpn.out_channels;
        let hidden = (0..config.head.hidden_convs)
            .map(|i| {
                Conv2d::init(
                    &mut store,
                    &format!("head.hidden{}", i + 1),
                    c,
                    c,
                    3,
                    SAME3,
                    true,
                    1.0,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let cls = Conv2d::init(&mut store, "head.cls", c, 2, 3, SAME3, true, 0.1, &mut rng)?;
        let reg = Conv2d::init(&mut store, "head.reg", c, 4, 3, SAME3, true, 0.1, &mut rng)?;
        let p = config.head.prior_prob;
        let prior = T::from_f64_lossy((p / (1.0 - p)).ln());
        store.get_mut(cls.bias.expect("cls has a bias")).tensor.data_mut()[1] = prior;
        Ok(Detector {
            config: config.clone(),
            store,
            backbone,
            fpn,
            rfp,
            head: Head { hidden, cls, reg },
        })
    }

    /// Pyramid levels after the RFP blocks.
    pub fn features(&self, g: &mut Graph<T>, image: Var, ov: RfpOverride) -> Result<Vec<Var>> {
        let cs = self.backbone.forward(g, &self.store, image)?;
        let ps = self.fpn.forward(g, &self.store, &cs)?;
        let Some(stack) = &self.rfp else {
            return Ok(ps);
        };
        match ov {
            RfpOverride::None => attach_rfp(g, &self.store, &ps, &stack.cfg, &stack.blocks),
            RfpOverride::ForceBranch(b) => {
                if b == 0 || b > stack.cfg.branches {
                    return Err(Error::config(format!(
                        "forced branch {b} out of range 1..={}",
                        stack.cfg.branches
                    )));
                }
                ps.iter()
                    .zip(&stack.blocks)
                    .map(|(&p, blk)| rfp_forward_forced_branch(g, &self.store, p, &stack.cfg, blk, b - 1))
                    .collect()
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, image: Var, ov: RfpOverride) -> Result<HeadOutputs> {
        let feats = self.features(g, image, ov)?;
        let mut cls = Vec::with_capacity(feats.len());
        let mut reg = Vec::with_capacity(feats.len());
        for f in feats {
            let mut x = f;
            for h in &self.head.hidden {
                x = h.forward(g, &self.store, x)?;
                x = g.relu(x)?;
            }
            cls.push(self.head.cls.forward(g, &self.store, x)?);
            reg.push(self.head.reg.forward(g, &self.store, x)?);
        }
        Ok(HeadOutputs { cls, reg })
    }

    pub fn anchors(&self, hw: (usize, usize)) -> Vec<Anchor> {
        generate_anchors(&self.config.fpn, hw, self.config.head.anchor_scale)
    }

    fn prepare(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, _, _, _] = image.dims4()?;
        if n != 1 {
            return Err(Error::config(format!(
                "detector takes one image at a time, got batch {n}"
            )));
        }
        let (padded, info) = pad_to_multiple(image, self.config.fpn.input_multiple(), false)?;
        if info.was_padded() {
            log::warn!(
                "input {:?} zero-padded to {:?} (multiple of {})",
                info.original,
                info.padded,
                self.config.fpn.input_multiple()
            );
        }
        Ok(padded)
    }

    /// Build the training graph for one `1×C×H×W` image and its boxes and return the loss node.
    pub fn loss(&self, g: &mut Graph<T>, image: &Tensor<T>, gts: &[BBox]) -> Result<(Var, LossBreakdown)> {
        let image = self.prepare(image)?;
        let [_, _, h, w] = image.dims4()?;
        let x = g.constant(image);
        let out = self.forward(g, x, RfpOverride::None)?;
        let hc = &self.config.head;
        let m = match_anchors(&self.anchors((h, w)), gts, hc.pos_iou, hc.neg_iou)?;
        detection_loss(g, &out.cls, &out.reg, &m, &hc.loss())
    }

    /// Scored boxes for one `1×C×H×W` image.
    pub fn detect(&self, image: &Tensor<T>, image_id: usize, ov: RfpOverride) -> Result<Vec<Detection>> {
        let image = self.prepare(image)?;
        let [_, _, h, w] = image.dims4()?;
        let mut g = Graph::inference();
        let x = g.constant(image);
        let out = self.forward(&mut g, x, ov)?;
        let cls: Vec<&Tensor<T>> = out.cls.iter().map(|&v| g.value(v)).collect();
        let reg: Vec<&Tensor<T>> = out.reg.iter().map(|&v| g.value(v)).collect();
        postprocess(
            &cls,
            &reg,
            &self.anchors((h, w)),
            image_id,
            &self.config.head.postprocess(),
        )
    }

    /// Multiply-accumulates performed by convolutions in one forward pass at `h`×`w`.
    pub fn measure_macs(&self, h: usize, w: usize, ov: RfpOverride) -> Result<u64> {
        let image = Tensor::zeros(&[1, self.config.backbone.in_channels, h, w]);
        let (r, macs) = MacCounter::measure(|| -> Result<()> {
            let mut g = Graph::inference();
            let x = g.constant(image);
            self.forward(&mut g, x, ov).map(|_| ())
        });
        r?;
        Ok(macs)
    }

    /// Switch every RFP block to single-branch inference on `branch` (1-based).
    pub fn fold(&mut self, branch: usize) -> Result<()> {
        let Some(stack) = &mut self.rfp else {
            return Err(Error::config("model has no rfp blocks to fold"));
        };
        let folded = fold_for_inference(&stack.cfg, branch)?;
        stack.cfg = folded.clone();
        self.config.rfp = Some(folded);
        Ok(())
    }
}
