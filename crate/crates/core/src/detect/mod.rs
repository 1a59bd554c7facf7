//! Anchors, ground-truth assignment, the detection loss, NMS and AP evaluation.

pub mod anchors;
pub mod ap;
pub mod boxes;
pub mod loss;
pub mod matching;
pub mod nms;

pub use anchors::{generate_anchors, DEFAULT_ANCHOR_SCALE};
pub use ap::{evaluate_ap, write_pr_csv, ApReport, GroundTruthBox, PrPoint, AP_IOU};
pub use boxes::{decode, encode, iou, Anchor, BBox};
pub use loss::{detection_loss, face_score, smooth_l1, LossBreakdown, LossConfig};
pub use matching::{match_anchors, AnchorLabel, MatchResult, DEFAULT_NEG_IOU, DEFAULT_POS_IOU};
pub use nms::{detection_order, nms, Detection};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// Turning raw head outputs into detections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub score_threshold: f64,
    /// Candidates kept (by score) before NMS.
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            score_threshold: 0.05,
            pre_nms_top_k: 300,
            nms_iou: 0.4,
            max_detections: 100,
        }
    }
}

/// Decode per-level `1×2×H×W` logits and `1×4×H×W` deltas into NMS-filtered detections.
pub fn postprocess<T: Real>(
    cls: &[&Tensor<T>],
    reg: &[&Tensor<T>],
    anchors: &[Anchor],
    image_id: usize,
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>> {
    let logits = loss::gather_levels(cls, 2)?;
    let deltas = loss::gather_levels(reg, 4)?;
    let mut cands: Vec<Detection> = logits
        .iter()
        .zip(&deltas)
        .zip(anchors)
        .filter_map(|((l, d), a)| {
            let score = face_score(l[0], l[1]);
            (score >= cfg.score_threshold).then(|| Detection {
                image_id,
                bbox: decode(a, &[d[0], d[1], d[2].clamp(-6.0, 6.0), d[3].clamp(-6.0, 6.0)]),
                score,
            })
        })
        .collect();
    cands.sort_by(detection_order);
    cands.truncate(cfg.pre_nms_top_k);
    let mut kept = nms(&cands, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    Ok(kept)
}
