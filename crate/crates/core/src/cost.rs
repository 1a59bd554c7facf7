//! Parameter and multiply-accumulate accounting over a declarative layer list.
//!
//! Conventions:
//! * conv params = `cout·cin·k²` (+`cout` with bias), counted once per
//!   `shared_group`;
//! * conv MACs = `cout·cin·k²·Hout·Wout`, including taps that fall on padding
//!   (this is exactly what the im2col kernels execute);
//! * FLOPs = 2·MACs;
//! * residual adds, upsampling and branch fusion are counted as
//!   `Hout·Wout·C` elementwise operations, reported separately and left out of
//!   the MAC/FLOP totals;
//! * spatial sizes follow the convolution formula
//!   `floor((H + 2p − d(k−1) − 1)/s) + 1`, so an input that is not a multiple
//!   of the coarsest stride is handled by flooring at every layer.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DetectorConfig;
use crate::pyramid::{BackboneKind, BackboneSpec};
use crate::rfp::{default_dilations, Fusion, InferenceMode, RfpConfig};
use crate::tensor::{conv_output_size, ConvGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    ResidualAdd,
    Upsample,
    /// Elementwise fusion of branch outputs (mean or sum).
    Fuse,
    MaxPool,
    /// A head predictor; costed like a conv.
    Head,
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "conv" => LayerKind::Conv,
            "residual_add" | "residual-add" | "add" => LayerKind::ResidualAdd,
            "upsample" => LayerKind::Upsample,
            "fuse" | "pool" => LayerKind::Fuse,
            "maxpool" => LayerKind::MaxPool,
            "head" => LayerKind::Head,
            other => return Err(Error::config(format!("unknown layer kind `{other}`"))),
        })
    }
}

/// One layer with its input size resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    /// Layers in one group own a single weight tensor.
    pub shared_group: Option<String>,
    pub in_hw: (usize, usize),
    /// `false` for layers whose weights exist but are skipped at inference.
    pub active: bool,
}

impl LayerDesc {
    fn conv(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeometry,
        bias: bool,
        hw: (usize, usize),
    ) -> Self {
        LayerDesc {
            name: name.into(),
            kind: LayerKind::Conv,
            cin,
            cout,
            kernel: k,
            stride: geom.stride,
            padding: geom.padding,
            dilation: geom.dilation,
            bias,
            shared_group: None,
            in_hw: hw,
            active: true,
        }
    }

    fn elementwise(name: impl Into<String>, kind: LayerKind, c: usize, hw: (usize, usize)) -> Self {
        LayerDesc {
            name: name.into(),
            kind,
            cin: c,
            cout: c,
            kernel: 1,
            stride: 1,
            padding: 0,
            dilation: 1,
            bias: false,
            shared_group: None,
            in_hw: hw,
            active: true,
        }
    }

    fn shared(mut self, group: impl Into<String>) -> Self {
        self.shared_group = Some(group.into());
        self
    }

    fn is_conv_like(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::Head)
    }

    pub fn geom(&self) -> ConvGeometry {
        ConvGeometry::new(self.stride, self.padding, self.dilation)
    }

    pub fn out_hw(&self) -> Result<(usize, usize)> {
        match self.kind {
            LayerKind::Conv | LayerKind::Head | LayerKind::MaxPool => Ok((
                conv_output_size(self.in_hw.0, self.kernel, self.geom())?,
                conv_output_size(self.in_hw.1, self.kernel, self.geom())?,
            )),
            LayerKind::Upsample => Ok((2 * self.in_hw.0, 2 * self.in_hw.1)),
            LayerKind::ResidualAdd | LayerKind::Fuse => Ok(self.in_hw),
        }
    }

    /// Weight (and bias) scalars of this layer, ignoring sharing.
    pub fn own_params(&self) -> u64 {
        if !self.is_conv_like() {
            return 0;
        }
        (self.cout * self.cin * self.kernel * self.kernel + if self.bias { self.cout } else { 0 }) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub out_hw: (usize, usize),
    /// Zero for the second and later members of a shared group.
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input_hw: (usize, usize),
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub macs: u64,
    pub elementwise: u64,
}

impl CostReport {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }

    pub fn gmacs(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn gflops(&self) -> f64 {
        self.flops() as f64 / 1e9
    }

    pub fn mparams(&self) -> f64 {
        self.params as f64 / 1e6
    }

    /// Per-layer table as aligned text.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<34} {:<12} {:>11} {:>12} {:>16} {:>12}\n",
            "layer", "kind", "out", "params", "MACs", "elementwise"
        );
        for l in &self.layers {
            let kind = format!("{:?}", l.kind).to_lowercase();
            let _ = writeln!(
                s,
                "{:<34} {:<12} {:>11} {:>12} {:>16} {:>12}",
                l.name,
                kind,
                format!("{}x{}", l.out_hw.0, l.out_hw.1),
                l.params,
                l.macs,
                l.elementwise
            );
        }
        let _ = writeln!(
            s,
            "total @ {}x{}: params {} ({:.2}M), MACs {} ({:.2} G), FLOPs {:.2} G, elementwise {}",
            self.input_hw.0,
            self.input_hw.1,
            self.params,
            self.mparams(),
            self.macs,
            self.gmacs(),
            self.gflops(),
            self.elementwise
        );
        s
    }
}

/// Count parameters and MACs of `layers`.
pub fn count(layers: &[LayerDesc], input_hw: (usize, usize)) -> Result<CostReport> {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut group_shape: std::collections::HashMap<&str, (usize, usize, usize, bool)> = Default::default();
    let mut out = Vec::with_capacity(layers.len());
    let (mut params, mut macs, mut elementwise) = (0u64, 0u64, 0u64);
    for l in layers {
        let (ho, wo) = l.out_hw()?;
        let spatial = (ho * wo) as u64;
        let mut p = l.own_params();
        if let Some(g) = &l.shared_group {
            let shape = (l.cout, l.cin, l.kernel, l.bias);
            if let Some(prev) = group_shape.insert(g, shape) {
                if prev != shape {
                    return Err(Error::config(format!(
                        "shared group `{g}` mixes weight shapes {prev:?} and {shape:?} (layer {})",
                        l.name
                    )));
                }
            }
            if !seen.insert(g) {
                p = 0;
            }
        }
        let (m, e) = match l.kind {
            LayerKind::Conv | LayerKind::Head if l.active => {
                ((l.cout * l.cin * l.kernel * l.kernel) as u64 * spatial, 0)
            }
            LayerKind::ResidualAdd | LayerKind::Fuse | LayerKind::Upsample | LayerKind::MaxPool if l.active => {
                (0, spatial * l.cout as u64)
            }
            _ => (0, 0),
        };
        params += p;
        macs += m;
        elementwise += e;
        out.push(LayerCost {
            name: l.name.clone(),
            kind: l.kind,
            out_hw: (ho, wo),
            params: p,
            macs: m,
            elementwise: e,
        });
    }
    Ok(CostReport {
        input_hw,
        layers: out,
        params,
        macs,
        elementwise,
    })
}

struct Builder {
    layers: Vec<LayerDesc>,
}

impl Builder {
    fn conv(&mut self, l: LayerDesc) -> Result<(usize, usize)> {
        let hw = l.out_hw()?;
        self.layers.push(l);
        Ok(hw)
    }

    fn elem(&mut self, name: impl Into<String>, kind: LayerKind, c: usize, hw: (usize, usize)) {
        self.layers.push(LayerDesc::elementwise(name, kind, c, hw));
    }
}

const S2: ConvGeometry = ConvGeometry::new(2, 1, 1);
const SAME3: ConvGeometry = ConvGeometry::new(1, 1, 1);
const POINT: ConvGeometry = ConvGeometry::new(1, 0, 1);

fn stub_backbone(b: &mut Builder, spec: &BackboneSpec, hw: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let mut hw = b.conv(LayerDesc::conv(
        "backbone.stem1",
        spec.in_channels,
        spec.stem_channels,
        3,
        S2,
        true,
        hw,
    ))?;
    hw = b.conv(LayerDesc::conv(
        "backbone.stem2",
        spec.stem_channels,
        spec.stage_channels[0],
        3,
        S2,
        true,
        hw,
    ))?;
    let mut sizes = Vec::new();
    for s in 0..4 {
        let c = spec.stage_channels[s];
        let name = format!("backbone.c{}", s + 2);
        if s > 0 {
            hw = b.conv(LayerDesc::conv(
                format!("{name}.down"),
                spec.stage_channels[s - 1],
                c,
                3,
                S2,
                true,
                hw,
            ))?;
        }
        for k in 0..spec.blocks_per_stage[s] {
            let bn = format!("{name}.block{}", k + 1);
            b.conv(LayerDesc::conv(format!("{bn}.conv_a"), c, c, 3, SAME3, true, hw))?;
            b.conv(LayerDesc::conv(format!("{bn}.conv_b"), c, c, 3, SAME3, true, hw))?;
            b.elem(format!("{bn}.add"), LayerKind::ResidualAdd, c, hw);
        }
        sizes.push(hw);
    }
    Ok(sizes)
}

/// ResNet-50 (torchvision layout, stride on the 3×3 conv, no bias, batch-norm
/// parameters and the classifier omitted).
fn resnet50_backbone(b: &mut Builder, spec: &BackboneSpec, hw: (usize, usize)) -> Result<Vec<(usize, usize)>> {
    let mut hw = b.conv(LayerDesc::conv(
        "backbone.conv1",
        spec.in_channels,
        spec.stem_channels,
        7,
        ConvGeometry::new(2, 3, 1),
        false,
        hw,
    ))?;
    let pool = LayerDesc {
        kind: LayerKind::MaxPool,
        kernel: 3,
        ..LayerDesc::conv(
            "backbone.maxpool",
            spec.stem_channels,
            spec.stem_channels,
            3,
            S2,
            false,
            hw,
        )
    };
    hw = b.conv(pool)?;
    let mut cin = spec.stem_channels;
    let mut sizes = Vec::new();
    for s in 0..4 {
        let cout = spec.stage_channels[s];
        let width = cout / 4;
        for k in 0..spec.blocks_per_stage[s] {
            let stride = if k == 0 && s > 0 { 2 } else { 1 };
            let bn = format!("backbone.layer{}.{k}", s + 1);
            b.conv(LayerDesc::conv(format!("{bn}.conv1"), cin, width, 1, POINT, false, hw))?;
            let out = b.conv(LayerDesc::conv(
                format!("{bn}.conv2"),
                width,
                width,
                3,
                ConvGeometry::new(stride, 1, 1),
                false,
                hw,
            ))?;
            b.conv(LayerDesc::conv(
                format!("{bn}.conv3"),
                width,
                cout,
                1,
                POINT,
                false,
                out,
            ))?;
            if k == 0 {
                b.conv(LayerDesc::conv(
                    format!("{bn}.downsample"),
                    cin,
                    cout,
                    1,
                    ConvGeometry::new(stride, 0, 1),
                    false,
                    hw,
                ))?;
            }
            b.elem(format!("{bn}.add"), LayerKind::ResidualAdd, cout, out);
            hw = out;
            cin = cout;
        }
        sizes.push(hw);
    }
    Ok(sizes)
}

fn rfp_layers(b: &mut Builder, level: &str, cfg: &RfpConfig, hw: (usize, usize)) {
    let c = cfg.channels;
    let active = cfg.active_branches();
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let group = if cfg.share_weights {
            format!("rfp.{level}.weight")
        } else {
            format!("rfp.{level}.branch{}.weight", i + 1)
        };
        let mut l = LayerDesc::conv(
            format!("rfp.{level}.branch{}", i + 1),
            c,
            c,
            cfg.kernel,
            ConvGeometry::same(cfg.kernel, d),
            cfg.use_bias,
            hw,
        )
        .shared(group);
        l.active = active.contains(&i);
        b.layers.push(l);
        let mut add = LayerDesc::elementwise(
            format!("rfp.{level}.branch{}.shortcut", i + 1),
            LayerKind::ResidualAdd,
            c,
            hw,
        );
        add.active = l_active(&active, i);
        b.layers.push(add);
    }
    let single = matches!(cfg.inference, InferenceMode::Single(_));
    match cfg.fusion {
        Fusion::BranchPool | Fusion::Add if !single && cfg.branches > 1 => {
            b.elem(format!("rfp.{level}.fuse"), LayerKind::Fuse, c, hw)
        }
        Fusion::Concat => {
            let mut l = LayerDesc::conv(
                format!("rfp.{level}.concat_proj"),
                cfg.branches * c,
                c,
                1,
                POINT,
                false,
                hw,
            );
            l.active = !single;
            b.layers.push(l);
        }
        _ => {}
    }
}

fn l_active(active: &[usize], i: usize) -> bool {
    active.contains(&i)
}

/// The layer list of a detector at `input_hw`, in the order the network
/// evaluates it. For stub backbones this matches the built model exactly, so
/// counted MACs equal those measured by the conv kernels.
pub fn detector_graph(cfg: &DetectorConfig, input_hw: (usize, usize)) -> Result<Vec<LayerDesc>> {
    cfg.validate()?;
    let mut b = Builder { layers: Vec::new() };
    let sizes = match cfg.backbone.kind {
        BackboneKind::Stub => stub_backbone(&mut b, &cfg.backbone, input_hw)?,
        BackboneKind::Resnet50 => resnet50_backbone(&mut b, &cfg.backbone, input_hw)?,
    };
    let c = cfg.fpn.out_channels;
    let mut merged = [(0, 0); 4];
    for l in (0..4).rev() {
        let lat = b.conv(LayerDesc::conv(
            format!("fpn.lateral.p{}", l + 2),
            cfg.backbone.stage_channels[l],
            c,
            1,
            POINT,
            true,
            sizes[l],
        ))?;
        if l < 3 {
            b.elem(
                format!("fpn.p{}.upsample", l + 3),
                LayerKind::Upsample,
                c,
                merged[l + 1],
            );
            b.elem(format!("fpn.p{}.merge", l + 2), LayerKind::ResidualAdd, c, lat);
        }
        merged[l] = lat;
    }
    let mut levels = Vec::new();
    for (l, &hw) in merged.iter().enumerate() {
        levels.push(b.conv(LayerDesc::conv(
            format!("fpn.smooth.p{}", l + 2),
            c,
            c,
            3,
            SAME3,
            true,
            hw,
        ))?);
    }
    for l in 4..cfg.fpn.levels {
        let prev = levels[l - 1];
        levels.push(b.conv(LayerDesc::conv(format!("fpn.p{}", l + 2), c, c, 3, S2, true, prev))?);
    }
    for (l, &hw) in levels.iter().enumerate() {
        let name = format!("p{}", l + 2);
        if let Some(r) = &cfg.rfp {
            rfp_layers(&mut b, &name, r, hw);
        }
        for k in 0..cfg.head.hidden_convs {
            let n = format!("head.hidden{}", k + 1);
            b.layers
                .push(LayerDesc::conv(format!("{n}.{name}"), c, c, 3, SAME3, true, hw).shared(n));
        }
        for (n, k) in [("head.cls", 2), ("head.reg", 4)] {
            let mut l = LayerDesc::conv(format!("{n}.{name}"), c, k, 3, SAME3, true, hw).shared(n);
            l.kind = LayerKind::Head;
            b.layers.push(l);
        }
    }
    Ok(b.layers)
}

pub fn count_detector(cfg: &DetectorConfig, input_hw: (usize, usize)) -> Result<CostReport> {
    count(&detector_graph(cfg, input_hw)?, input_hw)
}

/// ResNet-50 + 256-channel six-level pyramid + default RFP + a shared
/// one-anchor head, evaluated at 960×1024 in the reference tables.
pub fn resnet50_preset() -> DetectorConfig {
    let mut cfg = DetectorConfig {
        backbone: BackboneSpec::resnet50(),
        ..DetectorConfig::desk(3, 256)
    };
    cfg.head.hidden_convs = 0;
    cfg
}

pub const RESNET50_INPUT: (usize, usize) = (960, 1024);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Branches,
    Sharing,
    Fusion,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branches" => Ok(AblationAxis::Branches),
            "sharing" => Ok(AblationAxis::Sharing),
            "fusion" => Ok(AblationAxis::Fusion),
            o => Err(Error::config(format!(
                "unknown ablation axis `{o}` (branches, sharing, fusion)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub input_hw: (usize, usize),
    pub rows: Vec<AblationRow>,
    /// Constant MAC increment per added branch (branches axis only).
    pub branch_step_macs: Option<u64>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("config,params,params_m,macs,gmacs,gflops\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.4},{},{:.4},{:.4}",
                r.label,
                r.params,
                r.params as f64 / 1e6,
                r.macs,
                r.macs as f64 / 1e9,
                2.0 * r.macs as f64 / 1e9
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:?} ablation @ {}x{}\n{:<26} {:>12} {:>10} {:>16} {:>10} {:>10}\n",
            self.axis, self.input_hw.0, self.input_hw.1, "config", "params", "Params(M)", "MACs", "GMACs", "GFLOPs"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<26} {:>12} {:>10.2} {:>16} {:>10.2} {:>10.2}",
                r.label,
                r.params,
                r.params as f64 / 1e6,
                r.macs,
                r.macs as f64 / 1e9,
                2.0 * r.macs as f64 / 1e9
            );
        }
        if let Some(step) = self.branch_step_macs {
            let _ = writeln!(
                s,
                "per-branch step: {} MACs = {:.2} GMACs = {:.2} GFLOPs",
                step,
                step as f64 / 1e9,
                2.0 * step as f64 / 1e9
            );
        }
        s
    }
}

/// Sweep one RFP axis around `base` (whose `rfp` gives channels and the
/// remaining settings). Asserts the structural claims: shared parameters do
/// not depend on the branch count and each branch adds the same MACs.
pub fn ablation_table(base: &DetectorConfig, axis: AblationAxis, input_hw: (usize, usize)) -> Result<AblationTable> {
    let c = base.fpn.out_channels;
    let rfp0 = base.rfp.clone().unwrap_or_else(|| RfpConfig::new(c));
    let with = |r: Option<RfpConfig>| DetectorConfig { rfp: r, ..base.clone() };
    let row = |label: &str, r: Option<RfpConfig>| -> Result<AblationRow> {
        let rep = count_detector(&with(r), input_hw)?;
        Ok(AblationRow {
            label: label.to_string(),
            params: rep.params,
            macs: rep.macs,
        })
    };
    let branches = |b: usize| RfpConfig {
        branches: b,
        dilations: default_dilations(b),
        share_weights: true,
        fusion: Fusion::BranchPool,
        inference: InferenceMode::AllBranches,
        ..rfp0.clone()
    };
    let mut rows = Vec::new();
    let mut step = None;
    match axis {
        AblationAxis::Branches => {
            rows.push(row("baseline (no rfp)", None)?);
            for b in 1..=4 {
                rows.push(row(
                    &format!("{b} branch{}", if b > 1 { "es" } else { "" }),
                    Some(branches(b)),
                )?);
            }
            if rows[1..].iter().any(|r| r.params != rows[1].params) {
                return Err(Error::invariant("shared-weight params vary with the branch count"));
            }
            let steps: Vec<u64> = rows.windows(2).map(|w| w[1].macs - w[0].macs).collect();
            if steps.iter().any(|&s| s != steps[0]) {
                return Err(Error::invariant(format!("per-branch MAC increments differ: {steps:?}")));
            }
            step = Some(steps[0]);
        }
        AblationAxis::Sharing => {
            let b = branches(3);
            rows.push(row("shared", Some(b.clone()))?);
            rows.push(row(
                "unshared",
                Some(RfpConfig {
                    share_weights: false,
                    ..b
                }),
            )?);
        }
        AblationAxis::Fusion => {
            let b = branches(3);
            rows.push(row("branch pool", Some(b.clone()))?);
            rows.push(row(
                "branch pool, single(2)",
                Some(crate::rfp::fold_for_inference(&b, 2)?),
            )?);
            rows.push(row(
                "add",
                Some(RfpConfig {
                    fusion: Fusion::Add,
                    ..b.clone()
                }),
            )?);
            rows.push(row(
                "concat",
                Some(RfpConfig {
                    fusion: Fusion::Concat,
                    ..b
                }),
            )?);
        }
    }
    Ok(AblationTable {
        axis,
        input_hw,
        rows,
        branch_step_macs: step,
    })
}

/// A layer graph in the config dialect: a list of `[[layer]]` tables.
///
/// ```toml
/// input = [960, 1024]
///
/// [[layer]]
/// name = "conv1"
/// kind = "conv"          # conv | head | residual_add | upsample | fuse | maxpool
/// cin = 3
/// cout = 64
/// kernel = 7
/// stride = 2
/// padding = 3
/// dilation = 1
/// bias = false
/// shared_group = "g1"    # optional
/// in_hw = [960, 1024]    # optional; defaults to the previous layer's output
/// ```
///
/// `input` overrides the file's `input`; layers with an explicit `in_hw` keep it.
pub fn parse_graph(text: &str, input: Option<(usize, usize)>) -> Result<(Vec<LayerDesc>, (usize, usize))> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawLayer {
        name: String,
        kind: String,
        #[serde(default)]
        cin: usize,
        #[serde(default)]
        cout: usize,
        #[serde(default = "one")]
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "one")]
        dilation: usize,
        #[serde(default)]
        bias: bool,
        shared_group: Option<String>,
        in_hw: Option<(usize, usize)>,
        #[serde(default = "yes")]
        active: bool,
    }
    fn one() -> usize {
        1
    }
    fn yes() -> bool {
        true
    }
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawGraph {
        input: Option<(usize, usize)>,
        layer: Vec<RawLayer>,
    }
    let raw: RawGraph = toml::from_str(text).map_err(|e| Error::config(format!("graph: {e}")))?;
    let input = input
        .or(raw.input)
        .ok_or_else(|| Error::config("graph: no input size (set `input = [H, W]`)"))?;
    let mut hw = input;
    let mut layers = Vec::with_capacity(raw.layer.len());
    for r in raw.layer {
        let kind: LayerKind = r
            .kind
            .parse()
            .map_err(|e: Error| Error::config(format!("layer `{}`: {e}", r.name)))?;
        let cout = if kind.is_elementwise() && r.cout == 0 {
            r.cin
        } else {
            r.cout
        };
        let l = LayerDesc {
            name: r.name,
            kind,
            cin: r.cin,
            cout,
            kernel: r.kernel,
            stride: r.stride,
            padding: r.padding,
            dilation: r.dilation,
            bias: r.bias,
            shared_group: r.shared_group,
            in_hw: r.in_hw.unwrap_or(hw),
            active: r.active,
        };
        hw = l.out_hw()?;
        layers.push(l);
    }
    Ok((layers, input))
}

impl LayerKind {
    fn is_elementwise(self) -> bool {
        !matches!(self, LayerKind::Conv | LayerKind::Head)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_256_params() {
        let l = LayerDesc::conv("c", 256, 256, 3, SAME3, false, (8, 8));
        assert_eq!(l.own_params(), 589_824);
        let r = count(&[l], (8, 8)).unwrap();
        assert_eq!(r.macs, 589_824 * 64);
        assert_eq!(r.flops(), 2 * r.macs);
    }

    #[test]
    fn shared_group_counts_once() {
        let a = LayerDesc::conv("a", 4, 4, 3, SAME3, false, (5, 5)).shared("g");
        let b = LayerDesc::conv("b", 4, 4, 3, ConvGeometry::same(3, 3), false, (5, 5)).shared("g");
        let r = count(&[a.clone(), b], (5, 5)).unwrap();
        assert_eq!(r.params, 144);
        assert_eq!(r.macs, 2 * 144 * 25);
        let bad = LayerDesc::conv("c", 4, 8, 3, SAME3, false, (5, 5)).shared("g");
        assert!(count(&[a, bad], (5, 5)).is_err());
    }

    #[test]
    fn resnet50_level_sizes() {
        let g = detector_graph(&resnet50_preset(), RESNET50_INPUT).unwrap();
        let hw: Vec<usize> = (2..=7)
            .map(|l| {
                let l = g.iter().find(|d| d.name == format!("rfp.p{l}.branch1")).unwrap();
                l.in_hw.0 * l.in_hw.1
            })
            .collect();
        assert_eq!(hw, vec![61440, 15360, 3840, 960, 240, 64]);
    }

    #[test]
    fn graph_text_and_unknown_kind() {
        let text =
            "input = [8, 8]\n[[layer]]\nname = \"a\"\nkind = \"conv\"\ncin = 2\ncout = 3\nkernel = 3\npadding = 1\n\
                    [[layer]]\nname = \"b\"\nkind = \"conv\"\ncin = 3\ncout = 3\nkernel = 1\nstride = 2\n";
        let (layers, hw) = parse_graph(text, None).unwrap();
        let r = count(&layers, hw).unwrap();
        assert_eq!(r.params, 54 + 9);
        assert_eq!(r.macs, 54 * 64 + 9 * 16);
        let bad = "input = [8, 8]\n[[layer]]\nname = \"x\"\nkind = \"deform\"\n";
        assert!(matches!(parse_graph(bad, None), Err(Error::Config(m)) if m.contains("deform")));
    }
}
