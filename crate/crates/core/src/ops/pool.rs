//! Spatial resampling: max pooling and bilinear upsampling.

use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;
use crate::tape::{Accumulator, Op, Tape, Var};
use crate::tensor::{Dims4, Tensor};

pub(crate) struct MaxPoolSaved {
    x: Var,
    /// Flat input index of the winning element for every output element.
    pub(crate) argmax: Vec<usize>,
}

pub(crate) struct UpsampleSaved {
    x: Var,
    dims: Dims4,
    factor: usize,
}

/// Upsampling factors supported by [`Tape::bilinear_upsample`].
pub const UPSAMPLE_FACTORS: [usize; 3] = [2, 4, 8];

/// Source taps for one output coordinate under half-pixel-centered sampling:
/// `src = (i + 0.5)/factor − 0.5`, clamped to the input edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn taps(in_size: usize, out_size: usize) -> Vec<Tap> {
    let ratio = in_size as f64 / out_size as f64;
    (0..out_size)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_size - 1);
            let hi = (lo + 1).min(in_size - 1);
            Tap { lo, hi, frac: src - lo as f64 }
        })
        .collect()
}

impl<T: Real> Tape<T> {
    /// Max pooling with a square `k×k` window and no padding. Ties go to the
    /// first element in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let d = Dims4::of("maxpool2d", self.shape(x))?;
        if k == 0 || stride == 0 {
            return arg_err("maxpool2d", "kernel and stride must be positive");
        }
        if k == stride && (d.h % stride != 0 || d.w % stride != 0) {
            return shape_err("maxpool2d", format!("{}×{} is not divisible by {stride}", d.h, d.w));
        }
        if d.h < k || d.w < k {
            return shape_err("maxpool2d", format!("window {k} larger than {}×{}", d.h, d.w));
        }
        let (oh, ow) = ((d.h - k) / stride + 1, (d.w - k) / stride + 1);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(d.n * d.c * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..d.n * d.c {
            let base = plane * d.plane();
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * d.w + ox * stride;
                    for ky in 0..k {
                        for kx in 0..k {
                            let i = base + (oy * stride + ky) * d.w + ox * stride + kx;
                            if xv[i] > xv[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[d.n, d.c, oh, ow], out)?;
        self.push(value, Op::MaxPool(MaxPoolSaved { x, argmax }), &[x])
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers, edge
    /// clamped).
    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if !UPSAMPLE_FACTORS.contains(&factor) {
            return arg_err("bilinear_upsample", format!("unsupported factor {factor}"));
        }
        let d = Dims4::of("bilinear_upsample", self.shape(x))?;
        let out = resize_bilinear(self.value(x).data(), d.n * d.c, d.h, d.w, d.h * factor, d.w * factor);
        let value = Tensor::new(&[d.n, d.c, d.h * factor, d.w * factor], out)?;
        self.push(value, Op::Upsample(UpsampleSaved { x, dims: d, factor }), &[x])
    }
}

/// Resizes `planes` row-major `h×w` planes to `oh×ow` with bilinear
/// interpolation.
pub fn resize_bilinear<T: Real>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for y in &ty {
            let fy = T::from_f64(y.frac);
            let (r0, r1) = (&src[y.lo * w..(y.lo + 1) * w], &src[y.hi * w..(y.hi + 1) * w]);
            for t in &tx {
                let fx = T::from_f64(t.frac);
                let top = r0[t.lo] + (r0[t.hi] - r0[t.lo]) * fx;
                let bot = r1[t.lo] + (r1[t.hi] - r1[t.lo]) * fx;
                out.push(top + (bot - top) * fy);
            }
        }
    }
    out
}

pub(crate) fn maxpool_backward<T: Real>(s: &MaxPoolSaved, g: &[T], acc: &mut Accumulator<'_, T>) {
    acc.with(s.x, |dx| {
        for (&i, &g) in s.argmax.iter().zip(g) {
            dx[i] += g;
        }
    });
}

pub(crate) fn upsample_backward<T: Real>(s: &UpsampleSaved, g: &[T], acc: &mut Accumulator<'_, T>) {
    let d = s.dims;
    let (oh, ow) = (d.h * s.factor, d.w * s.factor);
    let ty = taps(d.h, oh);
    let tx = taps(d.w, ow);
    acc.with(s.x, |dx| {
        for p in 0..d.n * d.c {
            let dst = &mut dx[p * d.plane()..(p + 1) * d.plane()];
            let gp = &g[p * oh * ow..(p + 1) * oh * ow];
            for (oy, y) in ty.iter().enumerate() {
                let fy = T::from_f64(y.frac);
                for (ox, t) in tx.iter().enumerate() {
                    let fx = T::from_f64(t.frac);
                    let gv = gp[oy * ow + ox];
                    let (top, bot) = (gv * (T::one() - fy), gv * fy);
                    dst[y.lo * d.w + t.lo] += top * (T::one() - fx);
                    dst[y.lo * d.w + t.hi] += top * fx;
                    dst[y.hi * d.w + t.lo] += bot * (T::one() - fx);
                    dst[y.hi * d.w + t.hi] += bot * fx;
                }
            }
        }
    });
}
