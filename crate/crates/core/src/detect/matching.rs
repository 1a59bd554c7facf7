use super::boxes::{encode, iou, Anchor, BBox};
use crate::error::{Error, Result};

/// Default IoU at or above which an anchor becomes positive.
pub const DEFAULT_POS_IOU: f64 = 0.35;
/// Default IoU below which an anchor becomes negative.
pub const DEFAULT_NEG_IOU: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    /// Regression target per anchor; zero unless the anchor is positive.
    pub targets: Vec<[f64; 4]>,
}

impl MatchResult {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive(_)))
            .count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(a, l)| match l {
            AnchorLabel::Positive(g) => Some((a, *g)),
            _ => None,
        })
    }
}

/// Assign every anchor to a ground truth, to background, or to neither.
///
/// An anchor whose best IoU (ties → lower gt index) is ≥ `pos_thresh` is
/// positive for that gt; below `neg_thresh` it is negative; otherwise ignored.
/// Then each gt, in index order, claims its highest-IoU anchor (ties → lower
/// anchor index) if that IoU is non-zero; a later gt overrides an earlier
/// claim on the same anchor.
pub fn match_anchors(anchors: &[Anchor], gts: &[BBox], pos_thresh: f64, neg_thresh: f64) -> Result<MatchResult> {
    if anchors.is_empty() {
        return Err(Error::contract("anchor matching needs at least one anchor"));
    }
    if !(0.0..=1.0).contains(&neg_thresh) || !(0.0..=1.0).contains(&pos_thresh) || neg_thresh > pos_thresh {
        return Err(Error::config(format!(
            "matching thresholds need 0 <= neg <= pos <= 1, got neg {neg_thresh}, pos {pos_thresh}"
        )));
    }
    let boxes: Vec<BBox> = anchors.iter().map(Anchor::bbox).collect();
    let mut labels = Vec::with_capacity(anchors.len());
    let mut gt_best: Vec<(f64, usize)> = vec![(0.0, 0); gts.len()];
    for (a, ab) in boxes.iter().enumerate() {
        let mut best = (-1.0, usize::MAX);
        for (gi, gt) in gts.iter().enumerate() {
            let v = iou(ab, gt);
            if v > best.0 {
                best = (v, gi);
            }
            if v > gt_best[gi].0 {
                gt_best[gi] = (v, a);
            }
        }
        labels.push(if best.1 == usize::MAX || best.0 < neg_thresh {
            AnchorLabel::Negative
        } else if best.0 >= pos_thresh {
            AnchorLabel::Positive(best.1)
        } else {
            AnchorLabel::Ignore
        });
    }
    for (gi, &(v, a)) in gt_best.iter().enumerate() {
        if v > 0.0 {
            labels[a] = AnchorLabel::Positive(gi);
        }
    }
    let targets = labels
        .iter()
        .zip(anchors)
        .map(|(l, anchor)| match l {
            AnchorLabel::Positive(g) => encode(anchor, &gts[*g]),
            _ => [0.0; 4],
        })
        .collect();
    Ok(MatchResult { labels, targets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::anchors::{generate_anchors, DEFAULT_ANCHOR_SCALE};
    use crate::pyramid::PyramidSpec;

    #[test]
    fn exact_gt_makes_that_anchor_positive() {
        let anchors = generate_anchors(&PyramidSpec::new(8), (128, 128), DEFAULT_ANCHOR_SCALE);
        let target = anchors[1100];
        let m = match_anchors(&anchors, &[target.bbox()], DEFAULT_POS_IOU, DEFAULT_NEG_IOU).unwrap();
        assert_eq!(m.labels[1100], AnchorLabel::Positive(0));
        assert_eq!(m.targets[1100], [0.0; 4]);
        assert!((iou(&target.bbox(), &anchors[1100].bbox()) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn no_gts_all_negative() {
        let anchors = generate_anchors(&PyramidSpec::new(8), (128, 128), DEFAULT_ANCHOR_SCALE);
        let m = match_anchors(&anchors, &[], 0.35, 0.3).unwrap();
        assert!(m.labels.iter().all(|l| *l == AnchorLabel::Negative));
        assert_eq!(m.num_positive(), 0);
    }

    #[test]
    fn tiny_gt_still_claims_an_anchor() {
        let anchors = generate_anchors(&PyramidSpec::new(8), (128, 128), DEFAULT_ANCHOR_SCALE);
        // 6x6 face has IoU 36/256 < 0.3 with the smallest anchors
        let m = match_anchors(&anchors, &[BBox::new(40.0, 40.0, 6.0, 6.0)], 0.35, 0.3).unwrap();
        assert_eq!(m.num_positive(), 1);
    }

    #[test]
    fn errors() {
        assert!(matches!(match_anchors(&[], &[], 0.5, 0.4), Err(Error::Contract(_))));
        let a = [Anchor {
            level: 0,
            cx: 0.0,
            cy: 0.0,
            w: 1.0,
            h: 1.0,
        }];
        assert!(matches!(match_anchors(&a, &[], 0.3, 0.5), Err(Error::Config(_))));
    }
}
