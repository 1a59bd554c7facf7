use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixels: top-left corner plus size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }
}

/// Intersection over union. Symmetric, in `[0, 1]`; zero when either box is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Reference box placed on a pyramid cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub level: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Regression target of `gt` relative to `anchor`:
/// `((gx − ax)/aw, (gy − ay)/ah, ln(gw/aw), ln(gh/ah))` on centres.
pub fn encode(anchor: &Anchor, gt: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    [
        (gx - anchor.cx) / anchor.w,
        (gy - anchor.cy) / anchor.h,
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
    ]
}

/// Inverse of [`encode`]. Sizes are positive by construction.
pub fn decode(anchor: &Anchor, deltas: &[f64; 4]) -> BBox {
    BBox::from_center(
        anchor.cx + deltas[0] * anchor.w,
        anchor.cy + deltas[1] * anchor.h,
        anchor.w * deltas[2].exp(),
        anchor.h * deltas[3].exp(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iou_cases() {
        let a = BBox::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(10.0, 10.0, 1.0, 1.0)), 0.0);
        let u = BBox::new(0.0, 0.0, 1.0, 1.0);
        let half = BBox::new(0.5, 0.0, 1.0, 1.0);
        assert!((iou(&u, &half) - 1.0 / 3.0).abs() < 1e-15);
        // touching edges share no area
        assert_eq!(iou(&u, &BBox::new(1.0, 0.0, 1.0, 1.0)), 0.0);
    }

    #[test]
    fn encode_decode_fixed_cases() {
        let a = Anchor {
            level: 0,
            cx: 10.0,
            cy: 20.0,
            w: 16.0,
            h: 16.0,
        };
        assert_eq!(encode(&a, &a.bbox()), [0.0; 4]);
        let doubled = decode(&a, &[0.0, 0.0, 2f64.ln(), 2f64.ln()]);
        assert!((doubled.w - 32.0).abs() < 1e-12 && (doubled.h - 32.0).abs() < 1e-12);
        let (cx, cy) = doubled.center();
        assert!((cx - 10.0).abs() < 1e-12 && (cy - 20.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn round_trip(
            ax in -50.0..200.0f64, ay in -50.0..200.0f64, aw in 1.0..300.0f64, ah in 1.0..300.0f64,
            gx in -50.0..200.0f64, gy in -50.0..200.0f64, gw in 0.5..300.0f64, gh in 0.5..300.0f64,
        ) {
            let a = Anchor { level: 0, cx: ax, cy: ay, w: aw, h: ah };
            let g = BBox::new(gx, gy, gw, gh);
            let back = decode(&a, &encode(&a, &g));
            prop_assert!((back.x - g.x).abs() < 1e-9);
            prop_assert!((back.y - g.y).abs() < 1e-9);
            prop_assert!((back.w - g.w).abs() < 1e-9);
            prop_assert!((back.h - g.h).abs() < 1e-9);
        }

        #[test]
        fn iou_symmetric_and_bounded(
            ax in 0.0..50.0f64, ay in 0.0..50.0f64, aw in 0.1..30.0f64, ah in 0.1..30.0f64,
            bx in 0.0..50.0f64, by in 0.0..50.0f64, bw in 0.1..30.0f64, bh in 0.1..30.0f64,
        ) {
            let a = BBox::new(ax, ay, aw, ah);
            let b = BBox::new(bx, by, bw, bh);
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }
    }
}
