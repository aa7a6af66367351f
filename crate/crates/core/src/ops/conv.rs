//! 2-d cross-correlation with zero padding, lowered to GEMM via im2col.

use crate::error::{shape_err, Result};
use crate::real::{gemm, Real, Trans};
use crate::tape::{Accumulator, Op, Tape, Var};
use crate::tensor::{Dims4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Pointwise convolutions read the input plane directly as the column
    /// matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

pub(crate) struct Conv2dSaved {
    x: Var,
    w: Var,
    b: Option<Var>,
    n: usize,
    c_out: usize,
    geom: ConvGeom,
}

/// Output spatial extent `⌊(size + 2·pad − k)/stride⌋ + 1`, or `None` when
/// the kernel does not fit.
pub fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Tape<T> {
    /// `x: N×C_in×H×W`, `w: C_out×C_in×k_h×k_w`, `b: C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xd = Dims4::of("conv2d", self.shape(x))?;
        let wd = Dims4::of("conv2d", self.shape(w))?;
        if wd.c != xd.c {
            return shape_err("conv2d", format!("input has {} channels, weight expects {}", xd.c, wd.c));
        }
        if let Some(b) = b {
            if self.shape(b) != [wd.n] {
                return shape_err("conv2d", format!("bias shape {:?} for {} filters", self.shape(b), wd.n));
            }
        }
        let (Some(oh), Some(ow)) = (conv_out_dim(xd.h, wd.h, stride, pad), conv_out_dim(xd.w, wd.w, stride, pad))
        else {
            return shape_err(
                "conv2d",
                format!("kernel {}×{} stride {stride} pad {pad} does not fit {}×{}", wd.h, wd.w, xd.h, xd.w),
            );
        };
        let geom = ConvGeom { c_in: xd.c, h: xd.h, w: xd.w, kh: wd.h, kw: wd.w, stride, pad, oh, ow };
        let c_out = wd.n;
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); xd.n * c_out * cols];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * cols] };
        for n in 0..xd.n {
            let xs = &xv[n * xd.c * xd.plane()..(n + 1) * xd.c * xd.plane()];
            let colm: &[T] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, &geom, &mut col);
                &col
            };
            let dst = &mut out[n * c_out * cols..(n + 1) * c_out * cols];
            gemm(Trans::No, Trans::No, c_out, rows, cols, wv, colm, T::zero(), dst);
            if let Some(b) = b {
                for (o, &bias) in self.value(b).data().iter().enumerate() {
                    dst[o * cols..(o + 1) * cols].iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let value = Tensor::new(&[xd.n, c_out, oh, ow], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Conv2d(Conv2dSaved { x, w, b, n: xd.n, c_out, geom }), &inputs)
    }
}

pub(crate) fn backward<T: Real>(s: &Conv2dSaved, g: &[T], acc: &mut Accumulator<'_, T>) {
    let geom = &s.geom;
    let (rows, cols) = (geom.col_rows(), geom.col_cols());
    let in_size = geom.c_in * geom.h * geom.w;
    let out_size = s.c_out * cols;
    let xv = acc.value(s.x).data();
    let wv = acc.value(s.w).data();

    if let Some(b) = s.b {
        let mut db = vec![T::zero(); s.c_out];
        for n in 0..s.n {
            for (o, d) in db.iter_mut().enumerate() {
                let start = n * out_size + o * cols;
                *d += g[start..start + cols].iter().copied().sum::<T>();
            }
        }
        acc.add(b, &db);
    }

    let want_w = acc.wants(s.w);
    let want_x = acc.wants(s.x);
    let mut dw = if want_w { vec![T::zero(); s.c_out * rows] } else { Vec::new() };
    let mut dx = if want_x { vec![T::zero(); s.n * in_size] } else { Vec::new() };
    let mut col = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * cols }];
    let mut dcol = vec![T::zero(); if want_x && !geom.is_pointwise() { rows * cols } else { 0 }];
    for n in 0..s.n {
        let gn = &g[n * out_size..(n + 1) * out_size];
        let xs = &xv[n * in_size..(n + 1) * in_size];
        if want_w {
            let colm: &[T] = if geom.is_pointwise() {
                xs
            } else {
                im2col(xs, geom, &mut col);
                &col
            };
            gemm(Trans::No, Trans::Yes, s.c_out, cols, rows, gn, colm, T::one(), &mut dw);
        }
        if want_x {
            let dxs = &mut dx[n * in_size..(n + 1) * in_size];
            if geom.is_pointwise() {
                gemm(Trans::Yes, Trans::No, rows, s.c_out, cols, wv, gn, T::one(), dxs);
            } else {
                gemm(Trans::Yes, Trans::No, rows, s.c_out, cols, wv, gn, T::zero(), &mut dcol);
                col2im(&dcol, geom, dxs);
            }
        }
    }
    if want_w {
        acc.add(s.w, &dw);
    }
    if want_x {
        acc.add(s.x, &dx);
    }
}
