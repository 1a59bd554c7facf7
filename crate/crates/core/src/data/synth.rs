//! Deterministic synthetic face scenes.
//!
//! A face is a bright disc with a contrasting inner disc and two dark eye dots;
//! its annotation is the disc's bounding square. Clutter is filled squares and
//! straight lines, drawn before the faces. Face sides are log-uniform in
//! `[min_size, max_size]`, so small and large objects are equally common per
//! octave and land on several pyramid levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// 1 (grayscale) or 3.
    pub channels: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: f64,
    pub max_size: f64,
    /// Mean number of clutter shapes (squares, lines) per image.
    pub clutter: f64,
    /// Mean number of decoys per image: face-like discs without eyes.
    pub decoys: f64,
    /// Std-dev of additive pixel noise, in grey levels.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 128,
            width: 128,
            channels: 1,
            min_objects: 1,
            max_objects: 4,
            min_size: 8.0,
            max_size: 96.0,
            clutter: 4.0,
            decoys: 0.0,
            noise: 6.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!(
                "data.channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::config("data image size must be positive"));
        }
        if !(self.min_size >= 4.0 && self.min_size <= self.max_size) {
            return Err(Error::config(format!(
                "data size range [{}, {}] needs 4 <= min_size <= max_size",
                self.min_size, self.max_size
            )));
        }
        if self.max_size > self.height.min(self.width) as f64 {
            return Err(Error::config(format!(
                "data.max_size {} does not fit a {}x{} image",
                self.max_size, self.height, self.width
            )));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::config("data.min_objects exceeds data.max_objects"));
        }
        if !(self.clutter >= 0.0 && self.decoys >= 0.0 && self.noise >= 0.0) {
            return Err(Error::config("data.clutter, data.decoys and data.noise must be >= 0"));
        }
        Ok(())
    }
}

/// One 8-bit image, channel-planar (`C×H×W`), with its face boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub boxes: Vec<BBox>,
}

impl Sample {
    /// `1×C×H×W`, pixels mapped to `[-1, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[1, self.channels, self.height, self.width], |i| {
            T::from_f64_lossy(self.pixels[i] as f64 / 127.5 - 1.0)
        })
    }

    /// Mirror left-right.
    pub fn hflip(&self) -> Sample {
        let (h, w) = (self.height, self.width);
        let mut pixels = vec![0u8; self.pixels.len()];
        for row in 0..self.channels * h {
            for x in 0..w {
                pixels[row * w + x] = self.pixels[row * w + (w - 1 - x)];
            }
        }
        let boxes = self
            .boxes
            .iter()
            .map(|b| BBox::new(w as f64 - b.x - b.w, b.y, b.w, b.h))
            .collect();
        Sample { pixels, boxes, ..*self }
    }

    /// Shift the content by `(dy, dx)` keeping the image size (a crop of the
    /// zero-padded image). Boxes are clipped to the frame; a box keeping less
    /// than half its area is dropped.
    pub fn shifted(&self, dy: isize, dx: isize) -> Sample {
        let (h, w) = (self.height as isize, self.width as isize);
        let mut pixels = vec![0u8; self.pixels.len()];
        for c in 0..self.channels as isize {
            for y in 0..h {
                let sy = y - dy;
                if !(0..h).contains(&sy) {
                    continue;
                }
                for x in 0..w {
                    let sx = x - dx;
                    if (0..w).contains(&sx) {
                        pixels[((c * h + y) * w + x) as usize] = self.pixels[((c * h + sy) * w + sx) as usize];
                    }
                }
            }
        }
        let boxes = self
            .boxes
            .iter()
            .filter_map(|b| {
                let x1 = (b.x + dx as f64).max(0.0);
                let y1 = (b.y + dy as f64).max(0.0);
                let x2 = (b.x2() + dx as f64).min(w as f64);
                let y2 = (b.y2() + dy as f64).min(h as f64);
                let clipped = BBox::new(x1, y1, x2 - x1, y2 - y1);
                (x2 > x1 && y2 > y1 && clipped.area() >= 0.5 * b.area()).then_some(clipped)
            })
            .collect();
        Sample { pixels, boxes, ..*self }
    }
}

fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

struct Canvas<'a> {
    h: usize,
    w: usize,
    c: usize,
    px: &'a mut [f64],
}

impl Canvas<'_> {
    fn put(&mut self, y: usize, x: usize, tone: &[f64; 3]) {
        for ch in 0..self.c {
            self.px[(ch * self.h + y) * self.w + x] = tone[ch];
        }
    }

    /// Fill pixels whose centre lies inside the disc.
    fn disc(&mut self, cx: f64, cy: f64, r: f64, tone: &[f64; 3]) {
        let y0 = (cy - r).floor().max(0.0) as usize;
        let y1 = ((cy + r).ceil() as usize).min(self.h);
        let x0 = (cx - r).floor().max(0.0) as usize;
        let x1 = ((cx + r).ceil() as usize).min(self.w);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    self.put(y, x, tone);
                }
            }
        }
    }

    fn rect(&mut self, x: usize, y: usize, w: usize, h: usize, tone: &[f64; 3]) {
        for yy in y..(y + h).min(self.h) {
            for xx in x..(x + w).min(self.w) {
                self.put(yy, xx, tone);
            }
        }
    }

    fn line(&mut self, (x0, y0): (f64, f64), (x1, y1): (f64, f64), thick: usize, tone: &[f64; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = (x0 + t * (x1 - x0)) as isize;
            let y = (y0 + t * (y1 - y0)) as isize;
            if x >= 0 && y >= 0 {
                self.rect(x as usize, y as usize, thick, thick, tone);
            }
        }
    }
}

/// `floor(mean)` plus one more with probability `frac(mean)`.
fn poisson_ish<R: Rng>(rng: &mut R, mean: f64) -> usize {
    let whole = mean.floor() as usize;
    whole + usize::from(rng.random::<f64>() < mean - whole as f64)
}

fn tone<R: Rng>(rng: &mut R, lo: f64, hi: f64, colour: bool) -> [f64; 3] {
    let base = rng.random_range(lo..hi);
    if colour {
        [base, rng.random_range(lo..hi), rng.random_range(lo..hi)]
    } else {
        [base; 3]
    }
}

/// Render image `index` of the dataset described by `spec`.
///
/// The image depends only on `(spec, index)`.
pub fn render_sample(spec: &SceneSpec, index: usize) -> Sample {
    let mut rng = image_rng(spec.seed, index);
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let colour = c == 3;
    let mut px = vec![0.0f64; c * h * w];

    // background: linear gradient
    let b0 = rng.random_range(40.0..110.0);
    let gy = rng.random_range(-0.3..0.3);
    let gx = rng.random_range(-0.3..0.3);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                px[(ch * h + y) * w + x] = b0 + gy * y as f64 + gx * x as f64;
            }
        }
    }
    let mut canvas = Canvas { h, w, c, px: &mut px };

    let n_clutter = poisson_ish(&mut rng, spec.clutter);
    for _ in 0..n_clutter {
        let t = tone(&mut rng, 20.0, 235.0, colour);
        if rng.random::<bool>() {
            let s = rng.random_range(4..=(h.min(w) / 4).max(5));
            let x = rng.random_range(0..w.saturating_sub(s).max(1));
            let y = rng.random_range(0..h.saturating_sub(s).max(1));
            canvas.rect(x, y, s, s, &t);
        } else {
            let p0 = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            let p1 = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
            canvas.line(p0, p1, rng.random_range(1..=2), &t);
        }
    }

    let (ln_lo, ln_hi) = (spec.min_size.ln(), spec.max_size.ln());
    let n_decoys = poisson_ish(&mut rng, spec.decoys);
    for _ in 0..n_decoys {
        let side = rng
            .random_range(ln_lo..=ln_hi)
            .exp()
            .round()
            .clamp(1.0, h.min(w) as f64);
        let r = side / 2.0;
        let cx = rng.random_range(r..=(w as f64 - r));
        let cy = rng.random_range(r..=(h as f64 - r));
        let skin = tone(&mut rng, 150.0, 230.0, colour);
        let inner = skin.map(|v| v - rng.random_range(25.0..60.0));
        canvas.disc(cx, cy, r, &skin);
        canvas.disc(cx, cy + 0.15 * r, 0.7 * r, &inner);
    }

    let n_obj = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        for _attempt in 0..30 {
            let side = if ln_hi > ln_lo {
                rng.random_range(ln_lo..=ln_hi).exp().round()
            } else {
                spec.min_size.round()
            };
            let side = side.clamp(1.0, h.min(w) as f64);
            let x = rng.random_range(0.0..=(w as f64 - side)).floor();
            let y = rng.random_range(0.0..=(h as f64 - side)).floor();
            let b = BBox::new(x, y, side, side);
            if boxes.iter().any(|o| iou(o, &b) > 0.0) {
                continue;
            }
            let r = side / 2.0;
            let (cx, cy) = (x + r, y + r);
            let skin = tone(&mut rng, 150.0, 230.0, colour);
            let inner = skin.map(|v| v - rng.random_range(25.0..60.0));
            let eye = tone(&mut rng, 5.0, 40.0, colour);
            canvas.disc(cx, cy, r, &skin);
            canvas.disc(cx, cy + 0.15 * r, 0.7 * r, &inner);
            let er = (0.13 * r).max(0.75);
            canvas.disc(cx - 0.35 * r, cy - 0.25 * r, er, &eye);
            canvas.disc(cx + 0.35 * r, cy - 0.25 * r, er, &eye);
            boxes.push(b);
            break;
        }
    }

    let pixels = px
        .iter()
        .map(|&v| {
            let n = if spec.noise > 0.0 {
                // Irwin-Hall approximation of a unit normal
                (0..4).map(|_| rng.random::<f64>()).sum::<f64>() - 2.0
            } else {
                0.0
            };
            (v + n * spec.noise * 3f64.sqrt()).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    Sample {
        height: h,
        width: w,
        channels: c,
        pixels,
        boxes,
    }
}

/// Images `start..start + n` of the dataset. Generation runs in parallel; the
/// output does not depend on the thread count.
pub fn generate_dataset(spec: &SceneSpec, start: usize, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((start..start + n)
        .into_par_iter()
        .map(|i| render_sample(spec, i))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_bounds() {
        let spec = SceneSpec {
            seed: 7,
            ..SceneSpec::default()
        };
        let a = generate_dataset(&spec, 0, 20).unwrap();
        let b = generate_dataset(&spec, 0, 20).unwrap();
        assert_eq!(a, b);
        for s in &a {
            for bx in &s.boxes {
                assert!(bx.x >= 0.0 && bx.y >= 0.0 && bx.x2() <= 128.0 && bx.y2() <= 128.0);
            }
        }
        // a sub-range renders the same images
        assert_eq!(generate_dataset(&spec, 5, 3).unwrap()[..], a[5..8]);
    }

    #[test]
    fn single_object_no_clutter() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            clutter: 0.0,
            ..SceneSpec::default()
        };
        for s in generate_dataset(&spec, 0, 30).unwrap() {
            assert_eq!(s.boxes.len(), 1);
        }
    }

    #[test]
    fn infeasible_sizes_rejected() {
        let spec = SceneSpec {
            max_size: 200.0,
            ..SceneSpec::default()
        };
        assert!(matches!(generate_dataset(&spec, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = render_sample(&SceneSpec::default(), 3);
        assert_eq!(s.hflip().hflip(), s);
        assert_eq!(s.shifted(0, 0), s);
    }
}
