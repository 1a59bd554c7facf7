mod common;

use common::rng;
use rand::Rng;
use rfp_core::model::{Detector, DetectorConfig, RfpOverride};
use rfp_core::pyramid::{pad_to_multiple, PyramidSpec};
use rfp_core::tensor::{ConvGeometry, Graph, Tensor};

/// Direct convolution straight from the definition.
fn conv_naive(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Tensor {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [o, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let span = g.dilation * (k - 1) + 1;
    let oh = (h + 2 * g.padding - span) / g.stride + 1;
    let ow = (wd + 2 * g.padding - span) / g.stride + 1;
    let xv = |b: usize, ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((b * c + ch) * h + y as usize) * wd + xx as usize]
        }
    };
    Tensor::from_fn(&[n, o, oh, ow], |i| {
        let (ox, rest) = (i % ow, i / ow);
        let (oy, rest) = (rest % oh, rest / oh);
        let (oc, b) = (rest % o, rest / o);
        let mut acc = 0.0;
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let xx = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                    acc += w.data()[((oc * c + ch) * k + ky) * k + kx] * xv(b, ch, y, xx);
                }
            }
        }
        acc
    })
}

#[test]
fn dilated_conv_matches_definition_even_past_the_input() {
    let mut r = rng(21);
    for _ in 0..30 {
        let h = r.random_range(1..=6);
        let w = r.random_range(1..=6);
        let d = r.random_range(1..=9);
        let geom = ConvGeometry::same(3, d);
        let x = Tensor::from_fn(&[1, 2, h, w], |_| r.random_range(-1.0..1.0));
        let k = Tensor::from_fn(&[3, 2, 3, 3], |_| r.random_range(-1.0..1.0));
        let mut g = Graph::inference();
        let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
        let y = g.conv2d(xv, kv, None, geom).unwrap();
        let want = conv_naive(&x, &k, geom);
        assert_eq!(g.shape(y), want.shape());
        assert!(g.value(y).max_abs_diff(&want) <= 1e-12, "h={h} w={w} d={d}");
    }
}

#[test]
fn level_strides_and_sizes() {
    let spec = PyramidSpec::new(16);
    assert_eq!(spec.strides(), vec![4, 8, 16, 32, 64, 128]);
    assert_eq!(spec.level_names()[5], "P7");
    assert_eq!(spec.input_multiple(), 128);
    assert_eq!(
        spec.level_sizes(256, 128),
        vec![(64, 32), (32, 16), (16, 8), (8, 4), (4, 2), (2, 1)]
    );
}

#[test]
fn features_have_level_shapes() {
    let cfg = DetectorConfig::desk(1, 8);
    let det: Detector = Detector::new(&cfg, 3).unwrap();
    let mut r = rng(5);
    let img = Tensor::from_fn(&[1, 1, 128, 256], |_| r.random_range(0.0..1.0));
    let mut g = Graph::inference();
    let x = g.constant(img);
    let feats = det.features(&mut g, x, RfpOverride::None).unwrap();
    let shapes: Vec<(usize, usize)> = feats.iter().map(|&f| (g.shape(f)[2], g.shape(f)[3])).collect();
    assert_eq!(shapes, cfg.fpn.level_sizes(128, 256));
    assert!(feats.iter().all(|&f| g.shape(f)[1] == 8));
    let cells: usize = shapes.iter().map(|(h, w)| h * w).sum();
    assert_eq!(det.anchors((128, 256)).len(), cells);
}

#[test]
fn odd_inputs_are_padded_not_rejected() {
    let img = Tensor::from_fn(&[1, 1, 100, 70], |i| i as f64);
    let (padded, info) = pad_to_multiple(&img, 128, false).unwrap();
    assert_eq!(padded.shape(), &[1, 1, 128, 128]);
    assert!(info.was_padded());
    assert_eq!(padded.data()[128 + 5], img.data()[70 + 5]);
    assert_eq!(padded.data()[128 + 80], 0.0);
    assert!(pad_to_multiple(&img, 128, true).is_err());

    let det: Detector = Detector::new(&DetectorConfig::desk(1, 8), 3).unwrap();
    let dets = det.detect(&img, 0, RfpOverride::None).unwrap();
    assert!(dets
        .iter()
        .all(|d| d.score.is_finite() && d.bbox.w > 0.0 && d.bbox.h > 0.0));
}
