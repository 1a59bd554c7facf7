//! Stub residual backbone, top-down feature pyramid (P2–P7) and per-level RFP blocks.
//!
//! The backbone produces C2–C5 at strides 4, 8, 16, 32. Laterals (1×1) project
//! them to a common width, the top-down path adds each level to the 2× nearest
//! upsampled level above it, and a 3×3 conv smooths every merged map. P6 and
//! P7 are stride-2 3×3 convs stacked on the smoothed P5.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::rfp::{rfp_forward, RfpConfig, RfpParams};
use crate::tensor::{ConvGeometry, Graph, ParamStore, Real, Tensor, Var};

pub const BACKBONE_STRIDES: [usize; 4] = [4, 8, 16, 32];
pub const MAX_LEVELS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Plain residual blocks; buildable and trainable.
    Stub,
    /// ResNet-50 layer table, only for cost accounting.
    Resnet50,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub in_channels: usize,
    /// Width of the first stride-2 stem conv; the second stem conv outputs `stage_channels[0]`.
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl BackboneSpec {
    pub fn desk(in_channels: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::Stub,
            in_channels,
            stem_channels: 8,
            stage_channels: [16, 32, 32, 32],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }

    pub fn resnet50() -> Self {
        BackboneSpec {
            kind: BackboneKind::Resnet50,
            in_channels: 3,
            stem_channels: 64,
            stage_channels: [256, 512, 1024, 2048],
            blocks_per_stage: [3, 4, 6, 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.stage_channels.contains(&0) {
            return Err(Error::config("backbone channel counts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub out_channels: usize,
    /// Number of pyramid levels starting at P2 (4 → P2–P5, 6 → P2–P7).
    pub levels: usize,
}

impl PyramidSpec {
    pub fn new(out_channels: usize) -> Self {
        PyramidSpec {
            out_channels,
            levels: MAX_LEVELS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(4..=MAX_LEVELS).contains(&self.levels) {
            return Err(Error::config(format!(
                "fpn.levels must be in 4..=6, got {}",
                self.levels
            )));
        }
        if self.out_channels == 0 {
            return Err(Error::config("fpn.out_channels must be >= 1"));
        }
        Ok(())
    }

    /// Stride of each level: 4, 8, …, 4·2^(levels−1).
    pub fn strides(&self) -> Vec<usize> {
        (0..self.levels).map(|l| 4 << l).collect()
    }

    /// Level names `P2`, `P3`, ….
    pub fn level_names(&self) -> Vec<String> {
        (0..self.levels).map(|l| format!("P{}", l + 2)).collect()
    }

    /// The coarsest stride; valid input sides are multiples of it.
    pub fn input_multiple(&self) -> usize {
        *self.strides().last().expect("at least 4 levels")
    }

    /// Spatial size of every level for an input of `h`×`w` (floor division by the stride).
    pub fn level_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        self.strides().iter().map(|s| (h / s, w / s)).collect()
    }
}

/// Bookkeeping for inputs padded up to a valid size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputPadding {
    pub original: (usize, usize),
    pub padded: (usize, usize),
}

impl InputPadding {
    pub fn was_padded(&self) -> bool {
        self.original != self.padded
    }
}

/// Zero-pad an N×C×H×W image at the bottom/right so both sides are multiples
/// of `multiple`. In strict mode an indivisible size is a configuration error.
pub fn pad_to_multiple<T: Real>(image: &Tensor<T>, multiple: usize, strict: bool) -> Result<(Tensor<T>, InputPadding)> {
    let [n, c, h, w] = image.dims4()?;
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    let info = InputPadding {
        original: (h, w),
        padded: (ph, pw),
    };
    if !info.was_padded() {
        return Ok((image.clone(), info));
    }
    if strict {
        return Err(Error::config(format!(
            "input {h}x{w} is not a multiple of {multiple} (strict mode)"
        )));
    }
    let mut out = Tensor::zeros(&[n, c, ph, pw]);
    for plane in 0..n * c {
        for y in 0..h {
            let src = &image.data()[(plane * h + y) * w..(plane * h + y + 1) * w];
            out.data_mut()[(plane * ph + y) * pw..(plane * ph + y) * pw + w].copy_from_slice(src);
        }
    }
    Ok((out, info))
}

const S2: ConvGeometry = ConvGeometry::new(2, 1, 1);
const SAME3: ConvGeometry = ConvGeometry::new(1, 1, 1);
const POINT: ConvGeometry = ConvGeometry::new(1, 0, 1);

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

impl ResidualBlock {
    /// `relu(x + conv_b(relu(conv_a(x))))`
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.conv_a.forward(g, store, x)?;
        let a = g.relu(a)?;
        let b = self.conv_b.forward(g, store, a)?;
        let s = g.add(x, b)?;
        g.relu(s)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub downsample: Option<Conv2d>,
    pub blocks: Vec<ResidualBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub stem: [Conv2d; 2],
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn init<T: Real, R: Rng>(store: &mut ParamStore<T>, spec: &BackboneSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if spec.kind != BackboneKind::Stub {
            return Err(Error::config(
                "backbone.kind = resnet50 is available to the cost model only; use `stub` to build a network",
            ));
        }
        let stem = [
            Conv2d::init(
                store,
                "backbone.stem1",
                spec.in_channels,
                spec.stem_channels,
                3,
                S2,
                true,
                1.0,
                rng,
            )?,
            Conv2d::init(
                store,
                "backbone.stem2",
                spec.stem_channels,
                spec.stage_channels[0],
                3,
                S2,
                true,
                1.0,
                rng,
            )?,
        ];
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let c = spec.stage_channels[s];
            let name = format!("backbone.c{}", s + 2);
            let downsample = if s == 0 {
                None
            } else {
                let cin = spec.stage_channels[s - 1];
                Some(Conv2d::init(
                    store,
                    &format!("{name}.down"),
                    cin,
                    c,
                    3,
                    S2,
                    true,
                    1.0,
                    rng,
                )?)
            };
            let mut blocks = Vec::new();
            for b in 0..spec.blocks_per_stage[s] {
                let bn = format!("{name}.block{}", b + 1);
                blocks.push(ResidualBlock {
                    conv_a: Conv2d::init(store, &format!("{bn}.conv_a"), c, c, 3, SAME3, true, 1.0, rng)?,
                    conv_b: Conv2d::init(store, &format!("{bn}.conv_b"), c, c, 3, SAME3, true, 0.25, rng)?,
                });
            }
            stages.push(Stage { downsample, blocks });
        }
        Ok(Backbone {
            spec: spec.clone(),
            stem,
            stages,
        })
    }

    /// C2–C5 for an N×Cin×H×W image.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: Var) -> Result<[Var; 4]> {
        let cin = g.value(image).dims4()?[1];
        if cin != self.spec.in_channels {
            return Err(Error::config(format!(
                "backbone expects {} input channels, image has {cin}",
                self.spec.in_channels
            )));
        }
        let mut x = self.stem[0].forward(g, store, image)?;
        x = g.relu(x)?;
        x = self.stem[1].forward(g, store, x)?;
        x = g.relu(x)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(down) = &stage.downsample {
                x = down.forward(g, store, x)?;
                x = g.relu(x)?;
            }
            for block in &stage.blocks {
                x = block.forward(g, store, x)?;
            }
            outs.push(x);
        }
        Ok(outs.try_into().expect("four stages"))
    }
}

#[derive(Clone, Debug)]
pub struct Fpn {
    pub spec: PyramidSpec,
    pub laterals: Vec<Conv2d>,
    pub smooth: Vec<Conv2d>,
    /// P6, P7 as present.
    pub extra: Vec<Conv2d>,
}

impl Fpn {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        backbone: &BackboneSpec,
        spec: &PyramidSpec,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let c = spec.out_channels;
        let mut laterals = Vec::new();
        let mut smooth = Vec::new();
        for (l, &cin) in backbone.stage_channels.iter().enumerate() {
            laterals.push(Conv2d::init(
                store,
                &format!("fpn.lateral.p{}", l + 2),
                cin,
                c,
                1,
                POINT,
                true,
                1.0,
                rng,
            )?);
            smooth.push(Conv2d::init(
                store,
                &format!("fpn.smooth.p{}", l + 2),
                c,
                c,
                3,
                SAME3,
                true,
                1.0,
                rng,
            )?);
        }
        let extra = (4..spec.levels)
            .map(|l| Conv2d::init(store, &format!("fpn.p{}", l + 2), c, c, 3, S2, true, 1.0, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Fpn {
            spec: spec.clone(),
            laterals,
            smooth,
            extra,
        })
    }

    /// P2.. from C2–C5. Where an upsampled map is larger than the lateral it
    /// joins (odd sizes), it is cropped to the lateral's size keeping the
    /// top-left corner.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, cs: &[Var; 4]) -> Result<Vec<Var>> {
        for (l, (&c, lat)) in cs.iter().zip(&self.laterals).enumerate() {
            let have = g.value(c).dims4()?[1];
            if have != lat.in_channels {
                return Err(Error::config(format!(
                    "C{} has {have} channels, lateral expects {}",
                    l + 2,
                    lat.in_channels
                )));
            }
        }
        let mut merged: Vec<Option<Var>> = vec![None; 4];
        let mut above: Option<Var> = None;
        for l in (0..4).rev() {
            let lat = self.laterals[l].forward(g, store, cs[l])?;
            let m = match above {
                None => lat,
                Some(up_src) => {
                    let up = g.upsample_nearest_2x(up_src)?;
                    let [_, _, lh, lw] = g.value(lat).dims4()?;
                    let [_, _, uh, uw] = g.value(up).dims4()?;
                    let up = if (uh, uw) == (lh, lw) {
                        up
                    } else if uh >= lh && uw >= lw {
                        g.crop(up, lh, lw)?
                    } else {
                        return Err(Error::config(format!(
                            "top-down map {uh}x{uw} is smaller than lateral P{} {lh}x{lw}",
                            l + 2
                        )));
                    };
                    g.add(lat, up)?
                }
            };
            merged[l] = Some(m);
            above = Some(m);
        }
        let mut out = Vec::with_capacity(self.spec.levels);
        for (l, m) in merged.into_iter().enumerate() {
            out.push(self.smooth[l].forward(g, store, m.expect("all levels merged"))?);
        }
        let mut prev = out[3];
        for conv in &self.extra {
            prev = conv.forward(g, store, prev)?;
            out.push(prev);
        }
        Ok(out)
    }
}

/// One independently parameterised RFP block per pyramid level.
#[derive(Clone, Debug)]
pub struct RfpStack {
    pub cfg: RfpConfig,
    pub blocks: Vec<RfpParams>,
}

impl RfpStack {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &RfpConfig,
        levels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..levels)
            .map(|l| RfpParams::init(store, &format!("rfp.p{}", l + 2), cfg, 0.5, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(RfpStack {
            cfg: cfg.clone(),
            blocks,
        })
    }
}

/// Apply one RFP block per level; every output has its input's shape.
pub fn attach_rfp<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    pyramid: &[Var],
    cfg: &RfpConfig,
    blocks: &[RfpParams],
) -> Result<Vec<Var>> {
    if pyramid.len() != blocks.len() {
        return Err(Error::config(format!(
            "{} pyramid levels but {} rfp blocks",
            pyramid.len(),
            blocks.len()
        )));
    }
    pyramid
        .iter()
        .zip(blocks)
        .map(|(&p, b)| rfp_forward(g, store, p, cfg, b))
        .collect()
}
