//! Dilated 2-D cross-correlation on N×C×H×W tensors, lowered to im2col + GEMM.

use std::cell::Cell;

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            dilation,
        }
    }

    /// Stride 1 with `padding = dilation * (k - 1) / 2`, i.e. size preserving for odd k.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry::new(1, dilation * (kernel - 1) / 2, dilation)
    }

    pub fn receptive_field(&self, kernel: usize) -> usize {
        self.dilation * (kernel - 1) + 1
    }
}

/// `floor((size + 2·padding − dilation·(k−1) − 1) / stride) + 1`, or an error when that is < 1.
pub fn conv_output_size(size: usize, kernel: usize, geom: ConvGeometry) -> Result<usize> {
    if kernel == 0 || geom.stride == 0 || geom.dilation == 0 {
        return Err(Error::config(format!(
            "conv needs kernel, stride and dilation >= 1 (got k={kernel}, {geom:?})"
        )));
    }
    let padded = size + 2 * geom.padding;
    let span = geom.dilation * (kernel - 1) + 1;
    if padded < span {
        return Err(Error::config(format!(
            "conv output size is non-positive: input {size}, padding {}, receptive field {span}",
            geom.padding
        )));
    }
    Ok((padded - span) / geom.stride + 1)
}

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Counts multiply-accumulates executed by the conv kernels on the current thread.
///
/// Every GEMM issued by [`conv2d_forward`] adds `m·k·n` to the counter, which is
/// the number of products it actually computes (including products against
/// zero padding).
pub struct MacCounter {
    start: u64,
}

impl MacCounter {
    pub fn start() -> Self {
        MacCounter {
            start: MACS.with(Cell::get),
        }
    }

    pub fn elapsed(&self) -> u64 {
        MACS.with(Cell::get) - self.start
    }

    /// Run `f` and return its result along with the MACs it executed.
    pub fn measure<R>(f: impl FnOnce() -> R) -> (R, u64) {
        let counter = MacCounter::start();
        let out = f();
        (out, counter.elapsed())
    }
}

fn record_macs(n: u64) {
    MACS.with(|c| c.set(c.get() + n));
}

struct Plan {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
}

impl Plan {
    fn new<T: Real>(x: &Tensor<T>, w: &Tensor<T>, geom: ConvGeometry) -> Result<Plan> {
        let [n, cin, h, wd] = x.dims4()?;
        let [cout, wcin, kh, kw] = w.dims4()?;
        if kh != kw {
            return Err(Error::config(format!(
                "only square kernels are supported, got {kh}x{kw}"
            )));
        }
        if wcin != cin {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {cin} channels, weight expects {wcin}"
            )));
        }
        let ho = conv_output_size(h, kh, geom)?;
        let wo = conv_output_size(wd, kh, geom)?;
        Ok(Plan {
            n,
            cin,
            h,
            w: wd,
            cout,
            k: kh,
            ho,
            wo,
            geom,
        })
    }

    fn cols_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    /// Valid output column range `[lo, hi)` for kernel tap offset `off = tap·dilation − padding`.
    fn col_range(&self, off: isize, out: usize, size: usize) -> (usize, usize) {
        let s = self.geom.stride as isize;
        // need 0 <= o*s + off < size
        let lo = if off >= 0 {
            0
        } else {
            (((-off) + s - 1) / s).min(out as isize)
        };
        let hi = if (size as isize) <= off {
            0
        } else {
            ((size as isize - off + s - 1) / s).min(out as isize)
        };
        (lo as usize, (hi.max(lo)) as usize)
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let (k, d, p, s) = (self.k, self.geom.dilation, self.geom.padding, self.geom.stride);
        let hw_out = self.spatial_out();
        for ci in 0..self.cin {
            let plane = &img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..k {
                let yoff = (kh * d) as isize - p as isize;
                let (oy_lo, oy_hi) = self.col_range(yoff, self.ho, self.h);
                for kw in 0..k {
                    let xoff = (kw * d) as isize - p as isize;
                    let (ox_lo, ox_hi) = self.col_range(xoff, self.wo, self.w);
                    let row = (ci * k + kh) * k + kw;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    dst.fill(T::zero());
                    if ox_lo == ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * s) as isize + yoff;
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if s == 1 {
                            let start = (ox_lo as isize + xoff) as usize;
                            drow[ox_lo..ox_hi].copy_from_slice(&src[start..start + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                drow[ox] = src[((ox * s) as isize + xoff) as usize];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let (k, d, p, s) = (self.k, self.geom.dilation, self.geom.padding, self.geom.stride);
        let hw_out = self.spatial_out();
        for ci in 0..self.cin {
            let plane = &mut img[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for kh in 0..k {
                let yoff = (kh * d) as isize - p as isize;
                let (oy_lo, oy_hi) = self.col_range(yoff, self.ho, self.h);
                for kw in 0..k {
                    let xoff = (kw * d) as isize - p as isize;
                    let (ox_lo, ox_hi) = self.col_range(xoff, self.wo, self.w);
                    let row = (ci * k + kh) * k + kw;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oy in oy_lo..oy_hi {
                        let iy = ((oy * s) as isize + yoff) as usize;
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        for ox in ox_lo..ox_hi {
                            dst[((ox * s) as isize + xoff) as usize] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation (no kernel flip).
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let plan = Plan::new(x, w, geom)?;
    if let Some(b) = bias {
        if b.shape() != [plan.cout] {
            return Err(Error::config(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                b.shape(),
                plan.cout
            )));
        }
    }
    let kdim = plan.cols_rows();
    let hw_out = plan.spatial_out();
    let in_sz = plan.cin * plan.h * plan.w;
    let out_sz = plan.cout * hw_out;
    let mut out = vec![T::zero(); plan.n * out_sz];
    let mut cols = if plan.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); kdim * hw_out]
    };
    for b in 0..plan.n {
        let img = &x.data()[b * in_sz..(b + 1) * in_sz];
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        if let Some(bias) = bias {
            for (co, plane) in dst.chunks_mut(hw_out).enumerate() {
                plane.fill(bias.data()[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if plan.is_pointwise() {
            img
        } else {
            plan.im2col(img, &mut cols);
            &cols
        };
        T::gemm(
            plan.cout,
            kdim,
            hw_out,
            w.data(),
            kdim,
            1,
            src,
            hw_out,
            1,
            beta,
            dst,
            hw_out,
            1,
        );
        record_macs((plan.cout * kdim * hw_out) as u64);
    }
    Tensor::new(&[plan.n, plan.cout, plan.ho, plan.wo], out)
}

/// Gradients of a conv2d w.r.t. its input, weight and bias. Only the requested
/// ones are computed.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: ConvGeometry,
    grad_out: &Tensor<T>,
    want: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let plan = Plan::new(x, w, geom)?;
    let (want_x, want_w, want_b) = want;
    let kdim = plan.cols_rows();
    let hw_out = plan.spatial_out();
    let in_sz = plan.cin * plan.h * plan.w;
    let out_sz = plan.cout * hw_out;
    if grad_out.shape() != [plan.n, plan.cout, plan.ho, plan.wo] {
        return Err(Error::invariant(format!(
            "conv2d upstream gradient has shape {:?}",
            grad_out.shape()
        )));
    }

    let mut gx = want_x.then(|| vec![T::zero(); x.numel()]);
    let mut gw = want_w.then(|| vec![T::zero(); w.numel()]);
    let mut gb = want_b.then(|| vec![T::zero(); plan.cout]);
    let mut cols = vec![T::zero(); if plan.is_pointwise() { 0 } else { kdim * hw_out }];
    let mut gcols = vec![
        T::zero();
        if want_x && !plan.is_pointwise() {
            kdim * hw_out
        } else {
            0
        }
    ];

    for b in 0..plan.n {
        let gy = &grad_out.data()[b * out_sz..(b + 1) * out_sz];
        if let Some(gb) = gb.as_mut() {
            for (co, plane) in gy.chunks(hw_out).enumerate() {
                gb[co] += plane.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            let img = &x.data()[b * in_sz..(b + 1) * in_sz];
            let src: &[T] = if plan.is_pointwise() {
                img
            } else {
                plan.im2col(img, &mut cols);
                &cols
            };
            // gW[cout, K] += gY[cout, HW] · colsᵀ[HW, K]
            T::gemm(
                plan.cout,
                hw_out,
                kdim,
                gy,
                hw_out,
                1,
                src,
                1,
                hw_out,
                T::one(),
                gw,
                kdim,
                1,
            );
        }
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[b * in_sz..(b + 1) * in_sz];
            if plan.is_pointwise() {
                // gX[cin, HW] += Wᵀ[cin, cout] · gY[cout, HW]
                T::gemm(
                    plan.cin,
                    plan.cout,
                    hw_out,
                    w.data(),
                    1,
                    kdim,
                    gy,
                    hw_out,
                    1,
                    T::one(),
                    dst,
                    hw_out,
                    1,
                );
            } else {
                T::gemm(
                    kdim,
                    plan.cout,
                    hw_out,
                    w.data(),
                    1,
                    kdim,
                    gy,
                    hw_out,
                    1,
                    T::zero(),
                    &mut gcols,
                    hw_out,
                    1,
                );
                plan.col2im_add(&gcols, dst);
            }
        }
    }

    Ok(ConvGrads {
        input: gx.map(|v| Tensor::new(x.shape(), v)).transpose()?,
        weight: gw.map(|v| Tensor::new(w.shape(), v)).transpose()?,
        bias: gb.map(|v| Tensor::new(&[plan.cout], v)).transpose()?,
    })
}
