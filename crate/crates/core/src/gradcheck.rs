//! Finite-difference gradient checks for every differentiable op and for a
//! whole (narrow) detector.
//!
//! Each check builds a scalar objective `L = Σ r ⊙ f(inputs)` with a fixed
//! random `r`, backpropagates once, and compares every analytic partial with
//! the central difference `(L(x+ε) − L(x−ε)) / 2ε`.
//!
//! The relative error is `|a − n| / max(|a|, |n|, floor)`. The floor keeps
//! round-off in tiny partials from dominating. A coordinate whose central
//! difference changes by more than the tolerance between step `ε` and `ε/2` sits
//! on a kink (ReLU, hard-negative selection) inside the stencil. Such a
//! coordinate is counted as skipped rather than compared, and a check fails if
//! more than a tenth of its coordinates are skipped.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::{detection_loss, generate_anchors, match_anchors, BBox, LossConfig};
use crate::error::{Error, Result};
use crate::model::{Detector, DetectorConfig, RfpOverride};
use crate::pyramid::{BackboneKind, BackboneSpec, PyramidSpec};
use crate::rfp::{Fusion, RfpConfig, RfpParams};
use crate::tensor::{conv_output_size, ConvGeometry, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub eps: f64,
    pub rel_floor: f64,
    pub tol: f64,
}

impl GradCheckSettings {
    /// Per-op defaults.
    pub fn ops() -> Self {
        GradCheckSettings {
            eps: 1e-5,
            rel_floor: 1e-3,
            tol: 1e-6,
        }
    }

    /// Whole-model defaults.
    pub fn model() -> Self {
        GradCheckSettings {
            tol: 1e-5,
            ..Self::ops()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub seeds: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Where the largest error occurred.
    pub worst: String,
    pub tol: f64,
}

impl CheckResult {
    fn new(name: &str, tol: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            seeds: 0,
            checked: 0,
            skipped: 0,
            max_rel_err: 0.0,
            worst: String::new(),
            tol,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tol && self.skipped * 10 <= self.checked + self.skipped
    }

    fn compare(
        &mut self,
        label: impl FnOnce() -> String,
        analytic: f64,
        s: &GradCheckSettings,
        mut f: impl FnMut(f64) -> Result<f64>,
    ) -> Result<()> {
        let d1 = (f(s.eps)? - f(-s.eps)?) / (2.0 * s.eps);
        let d2 = (f(0.5 * s.eps)? - f(-0.5 * s.eps)?) / s.eps;
        let scale = analytic.abs().max(d1.abs()).max(s.rel_floor);
        if (d1 - d2).abs() / scale > s.tol {
            self.skipped += 1;
            return Ok(());
        }
        self.checked += 1;
        let rel = (analytic - d1).abs() / scale;
        if !(rel <= self.max_rel_err) {
            self.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst = format!("{}: analytic {analytic:.9e}, numeric {d1:.9e}", label());
        }
        Ok(())
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<4} {:<22} seeds {:>4}  coords {:>6}  skipped {:>4}  max rel err {:.3e}",
            if self.passed() { "ok" } else { "FAIL" },
            self.name,
            self.seeds,
            self.checked,
            self.skipped,
            self.max_rel_err
        )?;
        if !self.passed() && !self.worst.is_empty() {
            write!(f, "  (worst {})", self.worst)?;
        }
        Ok(())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `Σ r ⊙ out`.
fn project(g: &mut Graph<f64>, out: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let m = g.mul(out, rv)?;
    g.sum(m)
}

type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

/// Check the gradient of `Σ r ⊙ build(inputs)` with respect to every input.
fn check_inputs(
    res: &mut CheckResult,
    inputs: &[Tensor],
    build: &Build,
    rng: &mut ChaCha8Rng,
    s: &GradCheckSettings,
) -> Result<()> {
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &leaves)?;
    let r = rand_tensor(rng, g.shape(out));
    let obj = project(&mut g, out, &r)?;
    g.backward(obj)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        let obj = project(&mut g, out, &r)?;
        Ok(g.value(obj).data()[0])
    };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for k in 0..xs[i].numel() {
            let x0 = xs[i].data()[k];
            res.compare(
                || format!("input {i}[{k}]"),
                analytic[i].data()[k],
                s,
                |off| {
                    xs[i].data_mut()[k] = x0 + off;
                    let v = eval(&xs);
                    xs[i].data_mut()[k] = x0;
                    v
                },
            )?;
        }
    }
    Ok(())
}

/// Check parameter gradients of `eval_obj(store)`; `coords` picks which scalars.
fn check_store(
    res: &mut CheckResult,
    store: &mut ParamStore<f64>,
    objective: &dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
    coords: &[(usize, usize)],
    s: &GradCheckSettings,
) -> Result<()> {
    let mut g = Graph::new();
    let obj = objective(&mut g, store)?;
    g.backward(obj)?;
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let grads: std::collections::HashMap<_, Tensor> = g.param_grads().map(|(id, t)| (id, t.clone())).collect();
    for &(p, k) in coords {
        let id = ids[p];
        let analytic = grads.get(&id).map_or(0.0, |t| t.data()[k]);
        let x0 = store.get(id).tensor.data()[k];
        let name = store.get(id).name.clone();
        res.compare(
            || format!("{name}[{k}]"),
            analytic,
            s,
            |off| {
                store.get_mut(id).tensor.data_mut()[k] = x0 + off;
                let mut g = Graph::inference();
                let v = objective(&mut g, store).map(|o| g.value(o).data()[0]);
                store.get_mut(id).tensor.data_mut()[k] = x0;
                v
            },
        )?;
    }
    Ok(())
}

fn all_coords(store: &ParamStore<f64>) -> Vec<(usize, usize)> {
    store
        .iter()
        .enumerate()
        .flat_map(|(p, (_, param))| (0..param.tensor.numel()).map(move |k| (p, k)))
        .collect()
}

fn random_conv(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Option<Tensor>, ConvGeometry) {
    loop {
        let (n, cin, cout) = (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let geom = ConvGeometry::new(
            rng.random_range(1..=2),
            rng.random_range(0..=2),
            rng.random_range(1..=3),
        );
        let (h, w) = (rng.random_range(3..=7), rng.random_range(3..=7));
        if conv_output_size(h, k, geom).is_err() || conv_output_size(w, k, geom).is_err() {
            continue;
        }
        let x = rand_tensor(rng, &[n, cin, h, w]);
        let wt = rand_tensor(rng, &[cout, cin, k, k]);
        let b = rng.random_bool(0.5).then(|| rand_tensor(rng, &[cout]));
        return (x, wt, b, geom);
    }
}

fn random_rfp(rng: &mut ChaCha8Rng, channels: usize) -> RfpConfig {
    let b = rng.random_range(1..=3);
    let mut cfg = RfpConfig::with_branches(channels, b);
    cfg.dilations = (0..b).map(|_| rng.random_range(1..=3)).collect();
    cfg.share_weights = rng.random_bool(0.5);
    cfg.fusion = [Fusion::BranchPool, Fusion::Add, Fusion::Concat][rng.random_range(0..3)];
    cfg.use_bias = rng.random_bool(0.5);
    cfg.post_relu = rng.random_bool(0.5);
    cfg
}

pub const OP_NAMES: [&str; 13] = [
    "conv2d",
    "add",
    "mul",
    "relu",
    "scale",
    "mean_n",
    "concat_channels",
    "upsample_nearest_2x",
    "crop",
    "sum",
    "detection_loss",
    "rfp_forward(x)",
    "rfp_forward(params)",
];

/// One op checked on the random instance drawn from `seed`.
fn check_op(name: &str, seed: u64, res: &mut CheckResult, s: &GradCheckSettings) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=5),
        rng.random_range(1..=5),
    ];
    match name {
        "conv2d" => {
            let (x, w, b, geom) = random_conv(&mut rng);
            let mut inputs = vec![x, w];
            inputs.extend(b);
            check_inputs(
                res,
                &inputs,
                &move |g, v| g.conv2d(v[0], v[1], v.get(2).copied(), geom),
                &mut rng,
                s,
            )
        }
        "add" | "mul" => {
            let inputs = [rand_tensor(&mut rng, &shape), rand_tensor(&mut rng, &shape)];
            let f: &Build = if name == "add" {
                &|g, v| g.add(v[0], v[1])
            } else {
                &|g, v| g.mul(v[0], v[1])
            };
            check_inputs(res, &inputs, f, &mut rng, s)
        }
        "relu" => {
            let x = rand_tensor(&mut rng, &shape);
            check_inputs(res, &[x], &|g, v| g.relu(v[0]), &mut rng, s)
        }
        "scale" => {
            let k = rng.random_range(-3.0..3.0);
            let x = rand_tensor(&mut rng, &shape);
            check_inputs(res, &[x], &move |g, v| g.scale(v[0], k), &mut rng, s)
        }
        "mean_n" => {
            let n = rng.random_range(1..=4);
            let xs: Vec<Tensor> = (0..n).map(|_| rand_tensor(&mut rng, &shape)).collect();
            check_inputs(res, &xs, &|g, v| g.mean_n(v), &mut rng, s)
        }
        "concat_channels" => {
            let n = rng.random_range(1..=3);
            let xs: Vec<Tensor> = (0..n)
                .map(|_| {
                    let c = rng.random_range(1..=3);
                    rand_tensor(&mut rng, &[shape[0], c, shape[2], shape[3]])
                })
                .collect();
            check_inputs(res, &xs, &|g, v| g.concat_channels(v), &mut rng, s)
        }
        "upsample_nearest_2x" => {
            let x = rand_tensor(&mut rng, &shape);
            check_inputs(res, &[x], &|g, v| g.upsample_nearest_2x(v[0]), &mut rng, s)
        }
        "crop" => {
            let (h, w) = (rng.random_range(1..=shape[2]), rng.random_range(1..=shape[3]));
            let x = rand_tensor(&mut rng, &shape);
            check_inputs(res, &[x], &move |g, v| g.crop(v[0], h, w), &mut rng, s)
        }
        "sum" => {
            let x = rand_tensor(&mut rng, &shape);
            check_inputs(res, &[x], &|g, v| g.sum(v[0]), &mut rng, s)
        }
        "detection_loss" => check_loss(&mut rng, res, s),
        "rfp_forward(x)" | "rfp_forward(params)" => {
            let c = rng.random_range(1..=3);
            let cfg = random_rfp(&mut rng, c);
            let mut store = ParamStore::new();
            let p = RfpParams::init(&mut store, "rfp", &cfg, 0.5, &mut rng)?;
            if name == "rfp_forward(x)" {
                let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
                let x = rand_tensor(&mut rng, &[1, c, h, w]);
                let f = |g: &mut Graph<f64>, v: &[Var]| crate::rfp::rfp_forward(g, &store, v[0], &cfg, &p);
                check_inputs(res, &[x], &f, &mut rng, s)
            } else {
                let (h, w) = (rng.random_range(2..=6), rng.random_range(2..=6));
                let x = rand_tensor(&mut rng, &[1, c, h, w]);
                let mut g0 = Graph::inference();
                let xv = g0.constant(x.clone());
                let out = crate::rfp::rfp_forward(&mut g0, &store, xv, &cfg, &p)?;
                let r = rand_tensor(&mut rng, g0.shape(out));
                let obj = |g: &mut Graph<f64>, st: &ParamStore<f64>| -> Result<Var> {
                    let xv = g.constant(x.clone());
                    let out = crate::rfp::rfp_forward(g, st, xv, &cfg, &p)?;
                    project(g, out, &r)
                };
                let coords = all_coords(&store);
                check_store(res, &mut store, &obj, &coords, s)
            }
        }
        other => Err(Error::config(format!("unknown op `{other}`"))),
    }
}

/// Detection loss with respect to the head maps, on real anchors and matches.
fn check_loss(rng: &mut ChaCha8Rng, res: &mut CheckResult, s: &GradCheckSettings) -> Result<()> {
    let spec = PyramidSpec {
        out_channels: 1,
        levels: 4,
    };
    let hw = (32, 32);
    let anchors = generate_anchors(&spec, hw, 4.0);
    let gts: Vec<BBox> = (0..rng.random_range(0..=3))
        .map(|_| {
            let (w, h) = (rng.random_range(6.0..24.0), rng.random_range(6.0..24.0));
            BBox {
                x: rng.random_range(0.0..32.0 - w),
                y: rng.random_range(0.0..32.0 - h),
                w,
                h,
            }
        })
        .collect();
    let m = match_anchors(&anchors, &gts, 0.35, 0.3)?;
    let cfg = LossConfig {
        neg_pos_ratio: rng.random_range(1..=3),
        reg_weight: rng.random_range(0.5..2.0),
    };
    let sizes = spec.level_sizes(hw.0, hw.1);
    let mut inputs = Vec::new();
    for &(h, w) in &sizes {
        inputs.push(rand_tensor(rng, &[1, 2, h, w]).map(|v| 3.0 * v));
    }
    for &(h, w) in &sizes {
        inputs.push(rand_tensor(rng, &[1, 4, h, w]).map(|v| 2.0 * v));
    }
    let nl = sizes.len();
    let f =
        move |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> { Ok(detection_loss(g, &v[..nl], &v[nl..], &m, &cfg)?.0) };
    // The loss is already scalar; projecting by a random r only rescales it.
    check_inputs(res, &inputs, &f, rng, s)
}

/// Run every op check over `seeds`.
pub fn check_ops(seeds: std::ops::Range<u64>, s: &GradCheckSettings) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, name) in OP_NAMES.iter().enumerate() {
        let mut res = CheckResult::new(name, s.tol);
        for seed in seeds.clone() {
            check_op(name, seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64), &mut res, s)?;
            res.seeds += 1;
        }
        out.push(res);
    }
    Ok(out)
}

/// A detector whose every width is `width`, with a varying RFP block.
pub fn narrow_detector_config(width: usize, rfp: Option<RfpConfig>) -> DetectorConfig {
    DetectorConfig {
        backbone: BackboneSpec {
            kind: BackboneKind::Stub,
            in_channels: 1,
            stem_channels: width,
            stage_channels: [width; 4],
            blocks_per_stage: [1; 4],
        },
        fpn: PyramidSpec::new(width),
        rfp,
        ..DetectorConfig::desk(1, width)
    }
}

/// The full detector (`width` channels throughout, `hw` input) against finite
/// differences. Every seed draws a fresh RFP variant, fresh weights and a fresh
/// image, then checks one random scalar of every parameter tensor plus
/// `image_coords` pixels. The objective is a random projection of all head
/// outputs on the unpadded input.
pub fn check_model(
    seeds: std::ops::Range<u64>,
    width: usize,
    hw: (usize, usize),
    image_coords: usize,
    s: &GradCheckSettings,
) -> Result<CheckResult> {
    let mut res = CheckResult::new("detector", s.tol);
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6f_6465_6c00);
        let rfp = rng.random_bool(0.9).then(|| random_rfp(&mut rng, width));
        let cfg = narrow_detector_config(width, rfp);
        let mut det: Detector<f64> = Detector::new(&cfg, rng.random())?;
        // Randomise biases too, so that no gradient is trivially zero.
        for p in det.store.iter_mut() {
            if p.tensor.shape().len() == 1 {
                for v in p.tensor.data_mut() {
                    *v = rng.random_range(-0.2..0.2);
                }
            }
        }
        let image = rand_tensor(&mut rng, &[1, 1, hw.0, hw.1]);

        let mut g0 = Graph::inference();
        let x = g0.constant(image.clone());
        let out = det.forward(&mut g0, x, RfpOverride::None)?;
        let rs: Vec<Tensor> = out
            .cls
            .iter()
            .chain(&out.reg)
            .map(|&v| rand_tensor(&mut rng, g0.shape(v)))
            .collect();

        let objective = |g: &mut Graph<f64>, det: &Detector<f64>, x: Var| -> Result<Var> {
            let out = det.forward(g, x, RfpOverride::None)?;
            let mut acc: Option<Var> = None;
            for (&v, r) in out.cls.iter().chain(&out.reg).zip(&rs) {
                let p = project(g, v, r)?;
                acc = Some(match acc {
                    None => p,
                    Some(a) => g.add(a, p)?,
                });
            }
            acc.ok_or_else(|| Error::invariant("detector produced no outputs"))
        };

        let mut g = Graph::new();
        let xv = g.leaf(image.clone());
        let obj = objective(&mut g, &det, xv)?;
        g.backward(obj)?;
        let grads: std::collections::HashMap<_, Tensor> = g.param_grads().map(|(id, t)| (id, t.clone())).collect();
        let image_grad = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(image.shape()));

        let eval = |det: &Detector<f64>, img: &Tensor| -> Result<f64> {
            let mut g = Graph::inference();
            let x = g.constant(img.clone());
            let o = objective(&mut g, det, x)?;
            Ok(g.value(o).data()[0])
        };

        let ids: Vec<_> = det.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let k = rng.random_range(0..det.store.get(id).tensor.numel());
            let analytic = grads.get(&id).map_or(0.0, |t| t.data()[k]);
            let x0 = det.store.get(id).tensor.data()[k];
            let name = det.store.get(id).name.clone();
            res.compare(
                || format!("seed {seed} {name}[{k}]"),
                analytic,
                s,
                |off| {
                    det.store.get_mut(id).tensor.data_mut()[k] = x0 + off;
                    let v = eval(&det, &image);
                    det.store.get_mut(id).tensor.data_mut()[k] = x0;
                    v
                },
            )?;
        }
        let mut img = image.clone();
        for _ in 0..image_coords {
            let k = rng.random_range(0..img.numel());
            let x0 = img.data()[k];
            res.compare(
                || format!("seed {seed} image[{k}]"),
                image_grad.data()[k],
                s,
                |off| {
                    img.data_mut()[k] = x0 + off;
                    let v = eval(&det, &img);
                    img.data_mut()[k] = x0;
                    v
                },
            )?;
        }
        res.seeds += 1;
    }
    Ok(res)
}
