mod common;

use common::*;
use rand::Rng;
use rfp_core::detect::{evaluate_ap, iou, match_anchors, nms, AP_IOU};

#[test]
fn iou_matches_reference() {
    let mut r = rng(11);
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut r, 30.0), random_box(&mut r, 30.0));
        assert_eq!(iou(&a, &b), iou_ref(&a, &b));
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }
}

#[test]
fn matching_matches_brute_force() {
    let mut r = rng(12);
    for case in 0..1000 {
        let na = r.random_range(1..=20);
        let anchors = random_anchors(&mut r, na);
        let ng = r.random_range(0..=20);
        let gts: Vec<_> = (0..ng).map(|_| random_box(&mut r, 32.0)).collect();
        let m = match_anchors(&anchors, &gts, 0.35, 0.3).unwrap();
        assert_eq!(m.labels, match_ref(&anchors, &gts, 0.35, 0.3), "case {case}");
    }
}

#[test]
fn nms_matches_brute_force() {
    let mut r = rng(13);
    for case in 0..1000 {
        let (dets, _) = random_eval_instance(&mut r);
        let t = [0.3, 0.4, 0.5][case % 3];
        assert_eq!(nms(&dets, t), nms_ref(&dets, t), "case {case}");
    }
}

#[test]
fn ap_matches_brute_force() {
    let mut r = rng(14);
    for case in 0..1000 {
        let (dets, gts) = random_eval_instance(&mut r);
        let got = evaluate_ap(&dets, &gts, AP_IOU).unwrap().ap;
        let want = ap_ref(&dets, &gts, AP_IOU);
        assert!((got - want).abs() <= 1e-9, "case {case}: {got} vs {want}");
    }
}
