//! Receptive field pyramid block.
//!
//! `B` parallel 3×3 convolutions over the same input, branch `i` dilated by
//! `dᵢ` and padded by `dᵢ` so every branch keeps the input resolution. Each
//! branch adds the input back (`yᵢ = conv(x, Wᵢ, dᵢ) + x`), and the branch
//! outputs are fused into one map with the input's shape. With
//! `share_weights` all branches read one weight tensor, so the parameter count
//! does not depend on `B`.
//!
//! Branch pooling (the elementwise mean of the `yᵢ`) keeps every branch on the
//! same scale as the fused output, which is what makes it valid to evaluate a
//! single branch at inference time ([`fold_for_inference`]). The `add` and
//! `concat` fusions exist for ablations and cannot be folded.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvGeometry, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const RFP_KERNEL: usize = 3;

/// Branch used by [`fold_for_inference`] unless told otherwise: the d=3 branch of the default block.
pub const DEFAULT_FOLD_BRANCH: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    BranchPool,
    Add,
    Concat,
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::BranchPool => "branch_pool",
            Fusion::Add => "add",
            Fusion::Concat => "concat",
        })
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "branch_pool" | "bp" | "pool" => Ok(Fusion::BranchPool),
            "add" => Ok(Fusion::Add),
            "concat" | "cat" => Ok(Fusion::Concat),
            other => Err(Error::config(format!(
                "rfp.fusion: unknown fusion `{other}` (expected branch_pool, add or concat)"
            ))),
        }
    }
}

/// Which branches run in a forward pass. Branch indices are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InferenceMode {
    AllBranches,
    Single(usize),
}

impl fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InferenceMode::AllBranches => f.write_str("all"),
            InferenceMode::Single(i) => write!(f, "single:{i}"),
        }
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" || s == "all_branches" {
            return Ok(InferenceMode::AllBranches);
        }
        s.strip_prefix("single:")
            .and_then(|i| i.parse().ok())
            .map(InferenceMode::Single)
            .ok_or_else(|| Error::config(format!("rfp.inference: expected `all` or `single:<branch>`, got `{s}`")))
    }
}

impl TryFrom<String> for InferenceMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InferenceMode> for String {
    fn from(m: InferenceMode) -> String {
        m.to_string()
    }
}

/// Dilation schedule `1, 3, 5, 7, …` for `b` branches.
pub fn default_dilations(b: usize) -> Vec<usize> {
    (0..b).map(|i| 2 * i + 1).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfpConfig {
    pub branches: usize,
    pub dilations: Vec<usize>,
    pub share_weights: bool,
    pub fusion: Fusion,
    pub inference: InferenceMode,
    pub channels: usize,
    pub kernel: usize,
    pub use_bias: bool,
    /// ReLU after fusion.
    pub post_relu: bool,
}

impl RfpConfig {
    /// Three shared-weight branches at dilations 1, 3, 5 fused by branch pooling.
    pub fn new(channels: usize) -> Self {
        Self::with_branches(channels, 3)
    }

    pub fn with_branches(channels: usize, branches: usize) -> Self {
        RfpConfig {
            branches,
            dilations: default_dilations(branches),
            share_weights: true,
            fusion: Fusion::BranchPool,
            inference: InferenceMode::AllBranches,
            channels,
            kernel: RFP_KERNEL,
            use_bias: false,
            post_relu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches == 0 {
            return Err(Error::config("rfp.branches must be at least 1"));
        }
        if self.dilations.len() != self.branches {
            return Err(Error::config(format!(
                "rfp.dilations has {} entries for {} branches",
                self.dilations.len(),
                self.branches
            )));
        }
        if self.dilations.contains(&0) {
            return Err(Error::config("rfp.dilations must all be >= 1"));
        }
        if self.kernel != RFP_KERNEL {
            return Err(Error::config(format!("rfp kernel is fixed at 3, got {}", self.kernel)));
        }
        if self.channels == 0 {
            return Err(Error::config("rfp channels must be >= 1"));
        }
        if let InferenceMode::Single(i) = self.inference {
            if i == 0 || i > self.branches {
                return Err(Error::config(format!(
                    "rfp.inference: branch {i} out of range 1..={}",
                    self.branches
                )));
            }
            if self.fusion != Fusion::BranchPool {
                return Err(single_branch_refusal(self.fusion));
            }
        }
        Ok(())
    }

    /// Number of branches a forward pass evaluates.
    pub fn active_branches(&self) -> Vec<usize> {
        match self.inference {
            InferenceMode::AllBranches => (0..self.branches).collect(),
            InferenceMode::Single(i) => vec![i - 1],
        }
    }

    pub fn default_fold_branch(&self) -> usize {
        DEFAULT_FOLD_BRANCH.min(self.branches)
    }

    fn weight_slots(&self) -> usize {
        if self.share_weights {
            1
        } else {
            self.branches
        }
    }
}

fn single_branch_refusal(fusion: Fusion) -> Error {
    let why = match fusion {
        Fusion::Add => {
            "summed branches are trained at B times the scale of any single branch, so one branch alone degrades badly"
        }
        Fusion::Concat => {
            "the 1x1 projection expects all B branch outputs, so a single branch produces no valid prediction"
        }
        Fusion::BranchPool => unreachable!("branch pooling can always be folded"),
    };
    Error::config(format!(
        "single-branch inference requires fusion = branch_pool, not {fusion}: {why}"
    ))
}

/// Switch a branch-pooled block to evaluate only `branch` (1-based).
/// Parameters are untouched.
pub fn fold_for_inference(cfg: &RfpConfig, branch: usize) -> Result<RfpConfig> {
    if cfg.fusion != Fusion::BranchPool {
        return Err(single_branch_refusal(cfg.fusion));
    }
    let folded = RfpConfig {
        inference: InferenceMode::Single(branch),
        ..cfg.clone()
    };
    folded.validate()?;
    Ok(folded)
}

/// Trainable parameters of a block: one weight per branch, or a single shared one.
pub fn rfp_param_count(cfg: &RfpConfig) -> usize {
    let c = cfg.channels;
    let conv = c * c * cfg.kernel * cfg.kernel + if cfg.use_bias { c } else { 0 };
    let proj = match cfg.fusion {
        Fusion::Concat => cfg.branches * c * c,
        _ => 0,
    };
    cfg.weight_slots() * conv + proj
}

#[derive(Clone, Debug)]
pub struct RfpParams {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub concat_proj: Option<ParamId>,
}

impl RfpParams {
    /// Register the block's parameters under `prefix`. Branch weights are drawn
    /// He-normal scaled by `gain`; biases start at zero.
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &RfpConfig,
        gain: f64,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let slots = cfg.weight_slots();
        let mut weights = Vec::with_capacity(slots);
        let mut biases = Vec::new();
        for s in 0..slots {
            let name = if cfg.share_weights {
                format!("{prefix}.weight")
            } else {
                format!("{prefix}.branch{}.weight", s + 1)
            };
            let id = store.insert_conv_weight(name, c, c, cfg.kernel, gain, rng)?;
            if cfg.share_weights {
                store.set_shared_ref_count(id, cfg.branches);
            }
            weights.push(id);
            if cfg.use_bias {
                let name = if cfg.share_weights {
                    format!("{prefix}.bias")
                } else {
                    format!("{prefix}.branch{}.bias", s + 1)
                };
                let b = store.insert(name, Tensor::zeros(&[c]))?;
                if cfg.share_weights {
                    store.set_shared_ref_count(b, cfg.branches);
                }
                biases.push(b);
            }
        }
        let concat_proj = match cfg.fusion {
            Fusion::Concat => Some(store.insert_conv_weight(
                format!("{prefix}.concat_proj.weight"),
                c,
                cfg.branches * c,
                1,
                1.0 / (cfg.branches as f64).sqrt(),
                rng,
            )?),
            _ => None,
        };
        Ok(RfpParams {
            weights,
            biases,
            concat_proj,
        })
    }

    fn slot(&self, branch: usize) -> usize {
        if self.weights.len() == 1 {
            0
        } else {
            branch
        }
    }
}

/// `yᵢ = conv(x, Wᵢ, dilation dᵢ, padding dᵢ) + x` for 0-based `branch`,
/// regardless of the configured fusion.
pub fn branch_output<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &RfpConfig,
    p: &RfpParams,
    branch: usize,
) -> Result<Var> {
    let d = *cfg
        .dilations
        .get(branch)
        .ok_or_else(|| Error::config(format!("rfp branch {} does not exist", branch + 1)))?;
    let slot = p.slot(branch);
    let w = g.param(store, p.weights[slot]);
    let b = p.biases.get(slot).map(|&b| g.param(store, b));
    let conv = g.conv2d(x, w, b, ConvGeometry::same(cfg.kernel, d))?;
    if g.shape(conv) != g.shape(x) {
        return Err(Error::invariant(format!(
            "rfp branch {} changed shape {:?} -> {:?}",
            branch + 1,
            g.shape(x),
            g.shape(conv)
        )));
    }
    g.add(conv, x)
}

/// Apply the block to `x` (N×C×H×W). The output has the shape of `x`.
pub fn rfp_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &RfpConfig,
    p: &RfpParams,
) -> Result<Var> {
    cfg.validate()?;
    let c = g.value(x).dims4()?[1];
    if c != cfg.channels {
        return Err(Error::config(format!(
            "rfp block expects {} channels, input has {c}",
            cfg.channels
        )));
    }
    let ys = cfg
        .active_branches()
        .into_iter()
        .map(|i| branch_output(g, store, x, cfg, p, i))
        .collect::<Result<Vec<_>>>()?;

    let fused = match (cfg.inference, cfg.fusion) {
        (InferenceMode::Single(_), _) => ys[0],
        (_, Fusion::BranchPool) => g.mean_n(&ys)?,
        (_, Fusion::Add) => {
            let mut acc = ys[0];
            for &y in &ys[1..] {
                acc = g.add(acc, y)?;
            }
            acc
        }
        (_, Fusion::Concat) => {
            let cat = g.concat_channels(&ys)?;
            let proj = p
                .concat_proj
                .ok_or_else(|| Error::invariant("concat fusion without projection weights"))?;
            let w = g.param(store, proj);
            g.conv2d(cat, w, None, ConvGeometry::new(1, 0, 1))?
        }
    };
    let out = if cfg.post_relu { g.relu(fused)? } else { fused };
    if g.shape(out) != g.shape(x) {
        return Err(Error::invariant("rfp output shape differs from its input"));
    }
    Ok(out)
}

/// Evaluate branch `branch` (0-based) alone whatever the fusion, bypassing the
/// fold check. Diagnostic only: it shows what single-branch inference does to a
/// block trained with `add` or `concat`.
pub fn rfp_forward_forced_branch<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    cfg: &RfpConfig,
    p: &RfpParams,
    branch: usize,
) -> Result<Var> {
    let y = branch_output(g, store, x, cfg, p, branch)?;
    if cfg.post_relu {
        g.relu(y)
    } else {
        Ok(y)
    }
}
