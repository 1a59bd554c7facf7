//! Brute-force reference implementations and random instance generators shared
//! by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rfp_core::detect::{Anchor, AnchorLabel, BBox, Detection, GroundTruthBox};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    let lo = if a0 > b0 { a0 } else { b0 };
    let hi = if a1 < b1 { a1 } else { b1 };
    if hi > lo {
        hi - lo
    } else {
        0.0
    }
}

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let inter = overlap(a.x, a.x + a.w, b.x, b.x + b.w) * overlap(a.y, a.y + a.h, b.y, b.y + b.h);
    let union = a.w * a.h + b.w * b.h - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Boxes on a coarse grid, so IoU ties and exact threshold hits occur.
pub fn random_box(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    let w = r.random_range(1..=8) as f64 * 2.0;
    let h = r.random_range(1..=8) as f64 * 2.0;
    let x = r.random_range(0..=((extent - w) as i64).max(0)) as f64;
    let y = r.random_range(0..=((extent - h) as i64).max(0)) as f64;
    BBox::new(x, y, w, h)
}

pub fn random_anchors(r: &mut ChaCha8Rng, n: usize) -> Vec<Anchor> {
    (0..n)
        .map(|_| {
            let b = random_box(r, 32.0);
            let (cx, cy) = b.center();
            Anchor {
                level: 0,
                cx,
                cy,
                w: b.w,
                h: b.h,
            }
        })
        .collect()
}

/// Labels by the stated rule, computed from the full IoU matrix.
pub fn match_ref(anchors: &[Anchor], gts: &[BBox], pos: f64, neg: f64) -> Vec<AnchorLabel> {
    let m: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou_ref(&a.bbox(), g)).collect())
        .collect();
    let mut labels: Vec<AnchorLabel> = m
        .iter()
        .map(|row| {
            let Some(best) = row.iter().cloned().reduce(f64::max) else {
                return AnchorLabel::Negative;
            };
            let gi = row.iter().position(|&v| v == best).unwrap();
            if best < neg {
                AnchorLabel::Negative
            } else if best >= pos {
                AnchorLabel::Positive(gi)
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    for gi in 0..gts.len() {
        let col: Vec<f64> = m.iter().map(|row| row[gi]).collect();
        let best = col.iter().cloned().fold(0.0, f64::max);
        if best > 0.0 {
            let a = col.iter().position(|&v| v == best).unwrap();
            labels[a] = AnchorLabel::Positive(gi);
        }
    }
    labels
}

fn key(d: &Detection) -> (f64, f64, f64, f64, f64, usize) {
    (-d.score, d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.image_id)
}

fn before(a: &Detection, b: &Detection) -> bool {
    key(a).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less)
}

/// Repeatedly take the best remaining detection and strike its overlaps.
pub fn nms_ref(dets: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut pool = dets.to_vec();
    let mut kept = Vec::new();
    while !pool.is_empty() {
        let mut bi = 0;
        for i in 1..pool.len() {
            if before(&pool[i], &pool[bi]) {
                bi = i;
            }
        }
        let best = pool.swap_remove(bi);
        pool.retain(|d| d.image_id != best.image_id || iou_ref(&d.bbox, &best.bbox) <= thresh);
        kept.push(best);
    }
    kept
}

/// AP as Σ over achieved recall levels of Δrecall × (best precision at that recall or beyond).
/// Precision and recall at every cut-off are recomputed from scratch.
pub fn ap_ref(dets: &[Detection], gts: &[GroundTruthBox], thresh: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut order: Vec<Detection> = dets.to_vec();
    // selection sort by the documented order
    for i in 0..order.len() {
        let mut bi = i;
        for j in i + 1..order.len() {
            if before(&order[j], &order[bi]) {
                bi = j;
            }
        }
        order.swap(i, bi);
    }
    let mut points = Vec::new();
    for k in 1..=order.len() {
        let mut claimed = vec![false; gts.len()];
        let mut tp = 0;
        for d in &order[..k] {
            let mut best: Option<(f64, usize)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if g.image_id != d.image_id || claimed[gi] {
                    continue;
                }
                let v = iou_ref(&d.bbox, &g.bbox);
                if v >= thresh && best.is_none_or(|(bv, _)| v > bv) {
                    best = Some((v, gi));
                }
            }
            if let Some((_, gi)) = best {
                claimed[gi] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / k as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).filter(|&r| r > 0.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}

/// A random detection/ground-truth instance over up to three images, ≤ 20 boxes each.
pub fn random_eval_instance(r: &mut ChaCha8Rng) -> (Vec<Detection>, Vec<GroundTruthBox>) {
    let images = r.random_range(1..=3);
    let ng = r.random_range(0..=20);
    let gts: Vec<GroundTruthBox> = (0..ng)
        .map(|_| GroundTruthBox {
            image_id: r.random_range(0..images),
            bbox: random_box(r, 40.0),
        })
        .collect();
    let mut dets = Vec::new();
    let nd = r.random_range(0..=20);
    for _ in 0..nd {
        let image_id = r.random_range(0..images);
        let own: Vec<&GroundTruthBox> = gts.iter().filter(|g| g.image_id == image_id).collect();
        let bbox = if !own.is_empty() && r.random_bool(0.6) {
            let g = own[r.random_range(0..own.len())].bbox;
            BBox::new(
                g.x + r.random_range(-2..=2) as f64,
                g.y + r.random_range(-2..=2) as f64,
                g.w,
                g.h,
            )
        } else {
            random_box(r, 40.0)
        };
        dets.push(Detection {
            image_id,
            bbox,
            score: r.random_range(0..=10) as f64 / 10.0,
        });
    }
    (dets, gts)
}
