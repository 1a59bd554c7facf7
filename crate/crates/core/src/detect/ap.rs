//! Average precision at a fixed IoU threshold.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::boxes::{iou, BBox};
use super::nms::{detection_order, Detection};
use crate::error::{Error, Result};

/// IoU at which a detection counts as a hit.
pub const AP_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    pub ap: f64,
    pub curve: Vec<PrPoint>,
    pub num_gt: usize,
    pub num_det: usize,
    pub true_positives: usize,
}

/// AP over all images at `iou_thresh`.
///
/// Detections are visited in [`detection_order`]. Each one claims the
/// unclaimed ground truth of its image with the highest IoU ≥ `iou_thresh`
/// (ties → lower gt index) and is a false positive when none is left. AP is
/// the area under the monotone precision envelope: `Σ (rᵢ − rᵢ₋₁)·max_{j≥i} pⱼ`.
pub fn evaluate_ap(dets: &[Detection], gts: &[GroundTruthBox], iou_thresh: f64) -> Result<ApReport> {
    if let Some(d) = dets.iter().find(|d| !d.score.is_finite()) {
        return Err(Error::contract(format!("detection score {} is not finite", d.score)));
    }
    let mut sorted = dets.to_vec();
    sorted.sort_by(detection_order);

    let num_images = gts
        .iter()
        .map(|g| g.image_id + 1)
        .chain(sorted.iter().map(|d| d.image_id + 1))
        .max()
        .unwrap_or(0);
    let mut by_image: Vec<Vec<usize>> = vec![Vec::new(); num_images];
    for (i, g) in gts.iter().enumerate() {
        by_image[g.image_id].push(i);
    }
    let mut claimed = vec![false; gts.len()];

    let mut curve = Vec::with_capacity(sorted.len());
    let mut tp = 0usize;
    for (k, d) in sorted.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for &gi in &by_image[d.image_id] {
            if claimed[gi] {
                continue;
            }
            let v = iou(&d.bbox, &gts[gi].bbox);
            if v >= iou_thresh && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, gi));
            }
        }
        if let Some((_, gi)) = best {
            claimed[gi] = true;
            tp += 1;
        }
        curve.push(PrPoint {
            recall: if gts.is_empty() {
                0.0
            } else {
                tp as f64 / gts.len() as f64
            },
            precision: tp as f64 / (k + 1) as f64,
            score: d.score,
        });
    }

    let mut ap = 0.0;
    if !gts.is_empty() {
        let mut envelope = 0.0f64;
        let mut prev_recall;
        for i in (0..curve.len()).rev() {
            envelope = envelope.max(curve[i].precision);
            prev_recall = if i == 0 { 0.0 } else { curve[i - 1].recall };
            ap += (curve[i].recall - prev_recall) * envelope;
        }
    }
    Ok(ApReport {
        ap,
        curve,
        num_gt: gts.len(),
        num_det: dets.len(),
        true_positives: tp,
    })
}

/// `recall,precision` CSV, one row per detection in evaluation order.
pub fn write_pr_csv(path: &Path, report: &ApReport, header_comment: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::new();
    for line in header_comment.lines() {
        body.push_str("# ");
        body.push_str(line);
        body.push('\n');
    }
    body.push_str("recall,precision\n");
    for p in &report.curve {
        body.push_str(&format!("{:.6},{:.6}\n", p.recall, p.precision));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: usize, x: f64) -> GroundTruthBox {
        GroundTruthBox {
            image_id: img,
            bbox: BBox::new(x, 0.0, 10.0, 10.0),
        }
    }

    fn det(img: usize, x: f64, s: f64) -> Detection {
        Detection {
            image_id: img,
            bbox: BBox::new(x, 0.0, 10.0, 10.0),
            score: s,
        }
    }

    #[test]
    fn perfect_detections() {
        let gts = vec![gt(0, 0.0), gt(0, 30.0), gt(1, 5.0)];
        let dets: Vec<_> = gts.iter().map(|g| det(g.image_id, g.bbox.x, 1.0)).collect();
        let r = evaluate_ap(&dets, &gts, AP_IOU).unwrap();
        assert_eq!(r.ap, 1.0);
        assert_eq!(r.true_positives, 3);
    }

    #[test]
    fn empty_detections() {
        let r = evaluate_ap(&[], &[gt(0, 0.0)], AP_IOU).unwrap();
        assert_eq!(r.ap, 0.0);
        assert!(r.curve.is_empty());
    }

    #[test]
    fn duplicate_is_false_positive() {
        // TP, FP(dup), TP → recall 0.5@1, 0.5@0.5, 1@0.667 → envelope 1, .667 → 0.5 + 0.5·0.667
        let gts = vec![gt(0, 0.0), gt(0, 50.0)];
        let dets = vec![det(0, 0.0, 0.9), det(0, 0.0, 0.8), det(0, 50.0, 0.7)];
        let r = evaluate_ap(&dets, &gts, AP_IOU).unwrap();
        assert!((r.ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_scores_rejected() {
        assert!(evaluate_ap(&[det(0, 0.0, f64::NAN)], &[], AP_IOU).is_err());
    }
}
