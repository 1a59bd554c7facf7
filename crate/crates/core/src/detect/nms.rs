use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};

/// A scored box on one image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

/// Score descending, then x, y, w, h ascending, then image id.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.image_id.cmp(&b.image_id))
}

/// Greedy suppression: walk detections in [`detection_order`] and drop any
/// whose IoU with an already kept box of the same image exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.image_id == d.image_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}
