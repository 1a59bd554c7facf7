use super::boxes::Anchor;
use crate::pyramid::PyramidSpec;

/// Default anchor side as a multiple of the level stride.
pub const DEFAULT_ANCHOR_SCALE: f64 = 4.0;

/// One square anchor of side `scale·stride` per cell, centred on the cell.
///
/// Ordered by level, then row, then column, which is also the order in which
/// the head's per-level maps are flattened.
pub fn generate_anchors(spec: &PyramidSpec, image_hw: (usize, usize), scale: f64) -> Vec<Anchor> {
    let (h, w) = image_hw;
    let mut out = Vec::new();
    for (level, (&stride, (lh, lw))) in spec.strides().iter().zip(spec.level_sizes(h, w)).enumerate() {
        let s = stride as f64;
        for y in 0..lh {
            for x in 0..lw {
                out.push(Anchor {
                    level,
                    cx: (x as f64 + 0.5) * s,
                    cy: (y as f64 + 0.5) * s,
                    w: scale * s,
                    h: scale * s,
                });
            }
        }
    }
    out
}
