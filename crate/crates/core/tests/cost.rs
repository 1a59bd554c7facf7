use rfp_core::cost::{
    ablation_table, count, count_detector, parse_graph, resnet50_preset, AblationAxis, CostReport, RESNET50_INPUT,
};
use rfp_core::model::{Detector, DetectorConfig, RfpOverride};
use rfp_core::rfp::{fold_for_inference, Fusion, RfpConfig};

fn prefixed(r: &CostReport, prefix: &str) -> (u64, u64) {
    r.layers
        .iter()
        .filter(|l| l.name.starts_with(prefix))
        .fold((0, 0), |(p, m), l| (p + l.params, m + l.macs))
}

fn within(x: f64, target: f64, frac: f64) -> bool {
    (x - target).abs() <= frac * target
}

#[test]
fn hand_counted_graph() {
    let text = r#"
        input = [16, 16]
        [[layer]]
        name = "stem"
        kind = "conv"
        cin = 3
        cout = 8
        kernel = 3
        padding = 1
        bias = true
        [[layer]]
        name = "a"
        kind = "conv"
        cin = 8
        cout = 8
        kernel = 3
        padding = 2
        dilation = 2
        shared_group = "g"
        [[layer]]
        name = "b"
        kind = "conv"
        cin = 8
        cout = 8
        kernel = 3
        padding = 4
        dilation = 4
        shared_group = "g"
        [[layer]]
        name = "down"
        kind = "conv"
        cin = 8
        cout = 4
        kernel = 1
        stride = 2
        [[layer]]
        name = "sum"
        kind = "residual_add"
        cin = 4
    "#;
    let (layers, hw) = parse_graph(text, None).unwrap();
    let r = count(&layers, hw).unwrap();
    // stem 3*8*9 + 8, shared 8*8*9 once, down 8*4
    assert_eq!(r.params, 224 + 576 + 32);
    // 256 pixels at full size, 64 after the stride-2 conv
    assert_eq!(r.macs, 256 * 8 * 27 + 2 * 256 * 8 * 72 + 64 * 4 * 8);
    assert_eq!(r.elementwise, 64 * 4);
    assert_eq!(r.layers.last().unwrap().out_hw, (8, 8));

    let (_, hw) = parse_graph(text, Some((32, 32))).unwrap();
    assert_eq!(hw, (32, 32));
}

#[test]
fn resnet50_component_sizes() {
    let r = count_detector(&resnet50_preset(), RESNET50_INPUT).unwrap();
    assert_eq!(prefixed(&r, "backbone.").0, 23_454_912);
    assert_eq!(prefixed(&r, "fpn.").0, 4_524_544);
    assert_eq!(prefixed(&r, "fpn.p6").0 + prefixed(&r, "fpn.p7").0, 1_180_160);
    // one shared 3x3 256->256 conv per level
    assert_eq!(prefixed(&r, "rfp.").0, 6 * 589_824);
    let sizes: Vec<_> = ["p2", "p3", "p4", "p5", "p6", "p7"]
        .iter()
        .map(|l| {
            r.layers
                .iter()
                .find(|c| c.name == format!("head.cls.{l}"))
                .unwrap()
                .out_hw
        })
        .collect();
    assert_eq!(
        sizes,
        vec![(240, 256), (120, 128), (60, 64), (30, 32), (15, 16), (8, 8)]
    );
}

#[test]
fn resnet50_tables_shape() {
    let base = resnet50_preset();
    let t = ablation_table(&base, AblationAxis::Branches, RESNET50_INPUT).unwrap();
    let baseline = &t.rows[0];
    assert!(within(baseline.params as f64, 27.99e6, 0.01));
    let rfp_params = t.rows[1].params;
    assert!(t.rows[1..].iter().all(|r| r.params == rfp_params));
    assert!(within(rfp_params as f64, 31.53e6, 0.01));
    let step = t.branch_step_macs.unwrap();
    for w in t.rows[1..].windows(2) {
        assert_eq!(w[1].macs - w[0].macs, step);
    }
    assert!(within(step as f64, 45.09e9, 0.10));

    let s = ablation_table(&base, AblationAxis::Sharing, RESNET50_INPUT).unwrap();
    let delta = (s.rows[1].params - s.rows[0].params) as f64;
    assert!(within(delta, 6.77e6, 0.06));
    assert_eq!(s.rows[0].macs, s.rows[1].macs);

    let f = ablation_table(&base, AblationAxis::Fusion, RESNET50_INPUT).unwrap();
    let macs = |label: &str| f.rows.iter().find(|r| r.label == label).unwrap().macs;
    assert_eq!(macs("branch pool, single(2)"), t.rows[1].macs);
    assert_eq!(macs("branch pool"), macs("add"));
    assert!(macs("concat") > macs("branch pool"));
}

#[test]
fn branch_macs_are_affine() {
    let mut cfg = DetectorConfig::desk(1, 8);
    let mut prev: Option<u64> = None;
    let mut steps = Vec::new();
    for b in 1..=5 {
        cfg.rfp = Some(RfpConfig::with_branches(8, b));
        let m = count_detector(&cfg, (64, 64)).unwrap().macs;
        if let Some(p) = prev {
            steps.push(m - p);
        }
        prev = Some(m);
    }
    assert!(steps.windows(2).all(|w| w[0] == w[1]));
}

fn measured_equals_counted(cfg: &DetectorConfig, hw: (usize, usize)) {
    let det: Detector<f32> = Detector::new(cfg, 0).unwrap();
    let measured = det.measure_macs(hw.0, hw.1, RfpOverride::None).unwrap();
    assert_eq!(measured, count_detector(cfg, hw).unwrap().macs, "{cfg:?}");
}

#[test]
fn kernels_agree_with_cost_model() {
    let base = DetectorConfig::desk(1, 8);
    measured_equals_counted(&base, (64, 64));
    measured_equals_counted(
        &DetectorConfig {
            rfp: None,
            ..base.clone()
        },
        (64, 64),
    );
    let mut concat = base.clone();
    concat.rfp = Some(RfpConfig {
        fusion: Fusion::Concat,
        share_weights: false,
        use_bias: true,
        ..RfpConfig::with_branches(8, 2)
    });
    measured_equals_counted(&concat, (32, 64));
    let mut folded = base.clone();
    folded.rfp = Some(fold_for_inference(&RfpConfig::new(8), 2).unwrap());
    measured_equals_counted(&folded, (64, 32));
    let mut deep = base;
    deep.head.hidden_convs = 2;
    deep.rfp = Some(RfpConfig::with_branches(8, 4));
    measured_equals_counted(&deep, (64, 64));
}

#[test]
fn params_agree_with_cost_model() {
    for cfg in [DetectorConfig::desk(1, 8), DetectorConfig::desk(3, 16)] {
        let det: Detector<f32> = Detector::new(&cfg, 0).unwrap();
        assert_eq!(
            det.store.scalar_count() as u64,
            count_detector(&cfg, (64, 64)).unwrap().params
        );
    }
}
