mod common;

use common::rng;
use rand::Rng;
use rfp_core::model::{Detector, DetectorConfig};
use rfp_core::rfp::{fold_for_inference, rfp_forward, Fusion, InferenceMode, RfpConfig, RfpParams};
use rfp_core::tensor::{Graph, ParamStore, Tensor};
use rfp_core::Error;

fn random_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

/// Randomise every parameter, including biases that start at zero.
fn scramble(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for p in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
}

fn forward(cfg: &RfpConfig, store: &ParamStore, p: &RfpParams, x: &Tensor) -> Tensor {
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = rfp_forward(&mut g, store, xv, cfg, p).unwrap();
    g.value(y).clone()
}

#[test]
fn equal_dilations_fold_identity() {
    for seed in 0..40 {
        let mut r = rng(seed);
        let b = r.random_range(2..=4);
        let d = r.random_range(1..=4);
        let c = r.random_range(1..=5);
        let cfg = RfpConfig {
            dilations: vec![d; b],
            use_bias: r.random_bool(0.5),
            post_relu: r.random_bool(0.5),
            ..RfpConfig::with_branches(c, b)
        };
        let mut store = ParamStore::new();
        let p = RfpParams::init(&mut store, "rfp", &cfg, 1.0, &mut r).unwrap();
        scramble(&mut store, seed + 1000);
        let shape = [r.random_range(1..=2), c, r.random_range(1..=12), r.random_range(1..=12)];
        let x = random_tensor(&mut r, &shape);
        let pooled = forward(&cfg, &store, &p, &x);
        for i in 1..=b {
            let single = forward(&fold_for_inference(&cfg, i).unwrap(), &store, &p, &x);
            assert_eq!(single.shape(), x.shape());
            assert!(pooled.max_abs_diff(&single) <= 1e-12, "seed {seed} branch {i}");
        }
    }
}

#[test]
fn distinct_dilations_fold_keeps_shape() {
    let cfg = RfpConfig::new(3);
    let mut r = rng(7);
    let mut store = ParamStore::new();
    let p = RfpParams::init(&mut store, "rfp", &cfg, 1.0, &mut r).unwrap();
    let x = random_tensor(&mut r, &[1, 3, 11, 9]);
    let pooled = forward(&cfg, &store, &p, &x);
    let single = forward(&fold_for_inference(&cfg, 2).unwrap(), &store, &p, &x);
    assert_eq!(pooled.shape(), single.shape());
    assert!(pooled.max_abs_diff(&single) > 1e-6);
}

#[test]
fn fold_refused_for_add_and_concat() {
    for fusion in [Fusion::Add, Fusion::Concat] {
        let rfp = RfpConfig {
            fusion,
            ..RfpConfig::new(4)
        };
        let err = fold_for_inference(&rfp, 2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains(&fusion.to_string()), "{err}");

        let mut cfg = DetectorConfig::desk(1, 4);
        cfg.rfp = Some(rfp);
        let mut det: Detector = Detector::new(&cfg, 1).unwrap();
        assert!(det.fold(2).is_err());
        assert_eq!(det.config.rfp.as_ref().unwrap().inference, InferenceMode::AllBranches);
    }
}

#[test]
fn shared_gradient_is_sum_of_unshared() {
    let shared = RfpConfig {
        use_bias: true,
        ..RfpConfig::new(3)
    };
    let unshared = RfpConfig {
        share_weights: false,
        ..shared.clone()
    };
    let mut r = rng(3);
    let mut s_store = ParamStore::new();
    let sp = RfpParams::init(&mut s_store, "rfp", &shared, 1.0, &mut r).unwrap();
    scramble(&mut s_store, 4);
    let mut u_store = ParamStore::new();
    let up = RfpParams::init(&mut u_store, "rfp", &unshared, 1.0, &mut r).unwrap();
    for i in 0..3 {
        u_store.get_mut(up.weights[i]).tensor = s_store.get(sp.weights[0]).tensor.clone();
        u_store.get_mut(up.biases[i]).tensor = s_store.get(sp.biases[0]).tensor.clone();
    }
    let x = random_tensor(&mut r, &[2, 3, 7, 8]);
    let weights = random_tensor(&mut r, &[2, 3, 7, 8]);

    let grads = |cfg: &RfpConfig, store: &ParamStore, p: &RfpParams| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(weights.clone());
        let y = rfp_forward(&mut g, store, xv, cfg, p).unwrap();
        let prod = g.mul(y, wv).unwrap();
        let loss = g.sum(prod).unwrap();
        g.backward(loss).unwrap();
        let all: std::collections::HashMap<_, _> = g.param_grads().map(|(id, t)| (id, t.clone())).collect();
        let w: Vec<Tensor> = p.weights.iter().map(|id| all[id].clone()).collect();
        let b: Vec<Tensor> = p.biases.iter().map(|id| all[id].clone()).collect();
        (w, b)
    };
    let (sw, sb) = grads(&shared, &s_store, &sp);
    let (uw, ub) = grads(&unshared, &u_store, &up);
    let sum = |ts: &[Tensor]| {
        let mut acc = ts[0].clone();
        for t in &ts[1..] {
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        acc
    };
    assert!(sw[0].max_abs_diff(&sum(&uw)) <= 1e-12);
    assert!(sb[0].max_abs_diff(&sum(&ub)) <= 1e-12);
}
