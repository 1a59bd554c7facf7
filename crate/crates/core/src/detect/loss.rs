//! Multi-task detection loss: softmax cross-entropy on face/background logits
//! plus smooth-L1 box regression on positive anchors.

use serde::{Deserialize, Serialize};

use super::matching::{AnchorLabel, MatchResult};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Hardest negatives kept per positive (at least this many when there are no positives).
    pub neg_pos_ratio: usize,
    /// Weight of the regression term.
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            neg_pos_ratio: 3,
            reg_weight: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub num_pos: usize,
    pub num_neg: usize,
}

/// `0.5·x²` for `|x| < 1`, else `|x| − 0.5`.
pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// `(log-sum-exp, softmax)` of a background/face logit pair.
fn softmax2(l0: f64, l1: f64) -> (f64, [f64; 2]) {
    let m = l0.max(l1);
    let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
    let z = e0 + e1;
    (m + z.ln(), [e0 / z, e1 / z])
}

/// Face probability for a `(background, face)` logit pair.
pub fn face_score(l0: f64, l1: f64) -> f64 {
    softmax2(l0, l1).1[1]
}

/// Read the per-anchor values of level maps shaped `1×K×H×W`, flattened level-major then row-major.
pub(crate) fn gather_levels<T: Real>(maps: &[&Tensor<T>], k: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    for t in maps {
        let [n, c, h, w] = t.dims4()?;
        if n != 1 || c != k {
            return Err(Error::config(format!(
                "head map has shape {:?}, expected 1x{k}xHxW",
                t.shape()
            )));
        }
        let d = t.data();
        for p in 0..h * w {
            out.push((0..k).map(|ch| d[ch * h * w + p].as_f64()).collect());
        }
    }
    Ok(out)
}

/// Loss over one image.
///
/// Classification averages the cross-entropy over all positives and the
/// `neg_pos_ratio·max(1, #pos)` negatives with the highest loss (ties → lower
/// anchor index). Regression averages, over positives, the smooth-L1 summed
/// across the four box deltas, and is zero without positives.
pub fn detection_loss<T: Real>(
    g: &mut Graph<T>,
    cls: &[Var],
    reg: &[Var],
    m: &MatchResult,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if cls.len() != reg.len() {
        return Err(Error::config("cls and reg heads have different level counts"));
    }
    let logits = gather_levels(&cls.iter().map(|&v| g.value(v)).collect::<Vec<_>>(), 2)?;
    let deltas = gather_levels(&reg.iter().map(|&v| g.value(v)).collect::<Vec<_>>(), 4)?;
    if logits.len() != m.labels.len() {
        return Err(Error::config(format!(
            "head produces {} anchors but the match covers {}",
            logits.len(),
            m.labels.len()
        )));
    }

    let mut ce = Vec::with_capacity(logits.len());
    let mut probs = Vec::with_capacity(logits.len());
    for (a, l) in logits.iter().enumerate() {
        let (lse, p) = softmax2(l[0], l[1]);
        let target = if matches!(m.labels[a], AnchorLabel::Positive(_)) {
            1
        } else {
            0
        };
        ce.push(lse - l[target]);
        probs.push(p);
    }

    let pos: Vec<usize> = m.positives().map(|(a, _)| a).collect();
    let mut neg: Vec<usize> = (0..m.labels.len())
        .filter(|&a| m.labels[a] == AnchorLabel::Negative)
        .collect();
    neg.sort_by(|&a, &b| ce[b].total_cmp(&ce[a]).then(a.cmp(&b)));
    neg.truncate(cfg.neg_pos_ratio * pos.len().max(1));

    let mut g_logits = vec![[0.0f64; 2]; logits.len()];
    let mut g_deltas = vec![[0.0f64; 4]; logits.len()];
    let n_cls = pos.len() + neg.len();
    let mut cls_loss = 0.0;
    if n_cls > 0 {
        let inv = 1.0 / n_cls as f64;
        for (&a, target) in pos.iter().map(|a| (a, 1)).chain(neg.iter().map(|a| (a, 0))) {
            cls_loss += ce[a] * inv;
            for c in 0..2 {
                let onehot = if c == target { 1.0 } else { 0.0 };
                g_logits[a][c] = (probs[a][c] - onehot) * inv;
            }
        }
    }
    let mut reg_loss = 0.0;
    if !pos.is_empty() {
        let inv = cfg.reg_weight / pos.len() as f64;
        for &a in &pos {
            for j in 0..4 {
                let d = deltas[a][j] - m.targets[a][j];
                reg_loss += smooth_l1(d) * inv;
                g_deltas[a][j] = smooth_l1_grad(d) * inv;
            }
        }
    }

    let mut local = Vec::with_capacity(2 * cls.len());
    let mut offset = 0;
    let mut cls_grads = Vec::new();
    let mut reg_grads = Vec::new();
    for &v in cls {
        let [_, _, h, w] = g.value(v).dims4()?;
        let hw = h * w;
        let mut gc = vec![T::zero(); 2 * hw];
        let mut gr = vec![T::zero(); 4 * hw];
        for p in 0..hw {
            for c in 0..2 {
                gc[c * hw + p] = T::from_f64_lossy(g_logits[offset + p][c]);
            }
            for j in 0..4 {
                gr[j * hw + p] = T::from_f64_lossy(g_deltas[offset + p][j]);
            }
        }
        cls_grads.push(Tensor::new(&[1, 2, h, w], gc)?);
        reg_grads.push(Tensor::new(&[1, 4, h, w], gr)?);
        offset += hw;
    }
    local.extend(cls_grads);
    local.extend(reg_grads);
    let inputs: Vec<Var> = cls.iter().chain(reg).copied().collect();
    let total = cls_loss + reg_loss;
    let root = g.fused_scalar(&inputs, T::from_f64_lossy(total), local)?;
    Ok((
        root,
        LossBreakdown {
            total,
            cls: cls_loss,
            reg: reg_loss,
            num_pos: pos.len(),
            num_neg: neg.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::matching::MatchResult;

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
        assert_eq!(smooth_l1(0.0), 0.0);
    }

    fn one_level(logit_margin: f64, deltas: [f64; 4], m: &MatchResult) -> LossBreakdown {
        // 1x1 level with two anchors side by side
        let mut g = Graph::<f64>::new();
        let mut cls = vec![0.0; 4];
        for (a, l) in m.labels.iter().enumerate() {
            let face = matches!(l, AnchorLabel::Positive(_));
            cls[if face { 2 + a } else { a }] = logit_margin;
        }
        let c = g.leaf(Tensor::new(&[1, 2, 1, 2], cls).unwrap());
        let mut r = vec![0.0; 8];
        for j in 0..4 {
            r[j * 2] = deltas[j];
        }
        let r = g.leaf(Tensor::new(&[1, 4, 1, 2], r).unwrap());
        detection_loss(&mut g, &[c], &[r], m, &LossConfig::default()).unwrap().1
    }

    #[test]
    fn loss_vanishes_with_saturated_correct_logits() {
        let m = MatchResult {
            labels: vec![AnchorLabel::Positive(0), AnchorLabel::Negative],
            targets: vec![[0.1, -0.2, 0.3, 0.05], [0.0; 4]],
        };
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 10.0, 20.0, 40.0] {
            let l = one_level(margin, m.targets[0], &m);
            assert!(l.total >= 0.0);
            assert!(l.total < prev);
            prev = l.total;
        }
        assert!(prev < 1e-15);
        assert_eq!(one_level(40.0, m.targets[0], &m).reg, 0.0);
    }

    #[test]
    fn no_positives_means_no_regression() {
        let m = MatchResult {
            labels: vec![AnchorLabel::Negative, AnchorLabel::Negative],
            targets: vec![[0.0; 4]; 2],
        };
        let l = one_level(0.0, [3.0; 4], &m);
        assert_eq!(l.reg, 0.0);
        assert_eq!(l.num_pos, 0);
        assert_eq!(l.num_neg, 2);
    }
}
