//! Matrix and indexing operations: linear maps, softmax, embeddings,
//! channel concatenation, attention gating and time-step selection.

use crate::error::{arg_err, shape_err, Result};
use crate::real::{gemm, Real, Trans};
use crate::tape::{Accumulator, Op, Tape, Var};
use crate::tensor::{Dims4, Tensor};

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => shape_err(op, format!("expected a matrix, got {shape:?}")),
    }
}

impl<T: Real> Tape<T> {
    /// Concatenates along axis 1 (channels for `N×C×H×W`, columns for `N×D`).
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return arg_err("concat_channels", "no inputs");
        };
        let s0 = self.shape(first).to_vec();
        if s0.len() < 2 {
            return shape_err("concat_channels", format!("rank {} input", s0.len()));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return shape_err("concat_channels", format!("{s:?} does not match {s0:?}"));
            }
            total += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let n = s0[0];
        let mut out = Vec::with_capacity(n * total * inner);
        for b in 0..n {
            for &x in xs {
                let chunk = self.shape(x)[1] * inner;
                out.extend_from_slice(&self.value(x).data()[b * chunk..(b + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[1] = total;
        let value = Tensor::new(&shape, out)?;
        self.push(value, Op::Concat(xs.to_vec()), xs)
    }

    /// `out[n,c,h,w] = x[n,c,h,w] · sm[n,0,h,w]`.
    pub fn gate_multiply(&mut self, x: Var, sm: Var) -> Result<Var> {
        let xd = Dims4::of("gate_multiply", self.shape(x))?;
        let sd = Dims4::of("gate_multiply", self.shape(sm))?;
        if sd.c != 1 || sd.n != xd.n || sd.h != xd.h || sd.w != xd.w {
            return shape_err("gate_multiply", format!("map {:?} for input {:?}", self.shape(sm), self.shape(x)));
        }
        let (xv, sv) = (self.value(x).data(), self.value(sm).data());
        let plane = xd.plane();
        let mut out = Vec::with_capacity(xv.len());
        for n in 0..xd.n {
            let map = &sv[n * plane..(n + 1) * plane];
            for c in 0..xd.c {
                let off = (n * xd.c + c) * plane;
                out.extend(xv[off..off + plane].iter().zip(map).map(|(&a, &m)| a * m));
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(value, Op::Gate { x, sm }, &[x, sm])
    }

    /// `x·w + b` with `x: N×D_in`, `w: D_in×D_out`, `b: D_out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = matrix_dims("linear", self.shape(x))?;
        let (wi, d_out) = matrix_dims("linear", self.shape(w))?;
        if wi != d_in {
            return shape_err("linear", format!("input width {d_in} vs weight rows {wi}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [d_out] {
                return shape_err("linear", format!("bias {:?} for width {d_out}", self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); n * d_out];
        gemm(Trans::No, Trans::No, n, d_in, d_out, self.value(x).data(), self.value(w).data(), T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(bv).for_each(|(o, &b)| *o += b);
            }
        }
        let value = Tensor::new(&[n, d_out], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Linear { x, w, b }, &inputs)
    }

    /// Row-wise softmax of an `N×D` matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, d) = matrix_dims("softmax", self.shape(x))?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.shape(x), out)?;
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Gathers rows `idx` of a `V×E` table into an `N×E` matrix.
    pub fn embedding(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, e) = matrix_dims("embedding_lookup", self.shape(table))?;
        if idx.is_empty() {
            return arg_err("embedding_lookup", "no indices");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return arg_err("embedding_lookup", format!("index {bad} out of range for {v} rows"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * e);
        for &i in idx {
            out.extend_from_slice(&tv[i * e..(i + 1) * e]);
        }
        let value = Tensor::new(&[idx.len(), e], out)?;
        self.push(value, Op::Embedding { table, idx: idx.to_vec() }, &[table])
    }

    /// Picks step `t` of an `N×L×K` sequence tensor, giving `N×K`.
    pub fn select_step(&mut self, x: Var, t: usize) -> Result<Var> {
        let (n, l, k) = match *self.shape(x) {
            [n, l, k] => (n, l, k),
            ref s => return shape_err("select_step", format!("expected N×L×K, got {s:?}")),
        };
        if t >= l {
            return arg_err("select_step", format!("step {t} of {l}"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * k);
        for b in 0..n {
            let off = (b * l + t) * k;
            out.extend_from_slice(&xv[off..off + k]);
        }
        let value = Tensor::new(&[n, k], out)?;
        self.push(value, Op::SelectStep { x, t }, &[x])
    }
}

/// Numerically stable in-place softmax (max subtracted first).
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn concat_backward<T: Real>(xs: &[Var], out_shape: &[usize], g: &[T], acc: &mut Accumulator<'_, T>) {
    let inner: usize = out_shape[2..].iter().product();
    let n = out_shape[0];
    let row = out_shape[1] * inner;
    let mut offset = 0;
    for &x in xs {
        let chunk = acc.value(x).shape()[1] * inner;
        acc.with(x, |dx| {
            for b in 0..n {
                let src = &g[b * row + offset..b * row + offset + chunk];
                dx[b * chunk..(b + 1) * chunk].iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        });
        offset += chunk;
    }
}

pub(crate) fn gate_backward<T: Real>(x: Var, sm: Var, g: &[T], acc: &mut Accumulator<'_, T>) {
    let shape = acc.value(x).shape();
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let xv = acc.value(x).data();
    let sv = acc.value(sm).data();
    acc.with(x, |dx| {
        for b in 0..n {
            let map = &sv[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in 0..plane {
                    dx[off + i] += g[off + i] * map[i];
                }
            }
        }
    });
    acc.with(sm, |dsm| {
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in 0..plane {
                    dsm[b * plane + i] += g[off + i] * xv[off + i];
                }
            }
        }
    });
}

pub(crate) fn linear_backward<T: Real>(x: Var, w: Var, b: Option<Var>, g: &[T], acc: &mut Accumulator<'_, T>) {
    let (n, d_in) = (acc.value(x).shape()[0], acc.value(x).shape()[1]);
    let d_out = acc.value(w).shape()[1];
    if let Some(b) = b {
        let mut db = vec![T::zero(); d_out];
        for row in g.chunks(d_out) {
            db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
        }
        acc.add(b, &db);
    }
    let xv = acc.value(x).data();
    let wv = acc.value(w).data();
    if acc.wants(w) {
        let mut dw = vec![T::zero(); d_in * d_out];
        gemm(Trans::Yes, Trans::No, d_in, n, d_out, xv, g, T::zero(), &mut dw);
        acc.add(w, &dw);
    }
    if acc.wants(x) {
        let mut dx = vec![T::zero(); n * d_in];
        gemm(Trans::No, Trans::Yes, n, d_out, d_in, g, wv, T::zero(), &mut dx);
        acc.add(x, &dx);
    }
}

pub(crate) fn softmax_backward<T: Real>(x: Var, y: &[T], g: &[T], acc: &mut Accumulator<'_, T>) {
    let d = acc.value(x).shape()[1];
    acc.with(x, |dx| {
        for ((dx, y), g) in dx.chunks_mut(d).zip(y.chunks(d)).zip(g.chunks(d)) {
            let dot: T = y.iter().zip(g).map(|(&y, &g)| y * g).sum();
            for i in 0..d {
                dx[i] += y[i] * (g[i] - dot);
            }
        }
    });
}

pub(crate) fn embedding_backward<T: Real>(table: Var, idx: &[usize], g: &[T], acc: &mut Accumulator<'_, T>) {
    let e = acc.value(table).shape()[1];
    acc.with(table, |dt| {
        for (r, &i) in idx.iter().enumerate() {
            dt[i * e..(i + 1) * e].iter_mut().zip(&g[r * e..(r + 1) * e]).for_each(|(d, &g)| *d += g);
        }
    });
}

pub(crate) fn select_backward<T: Real>(x: Var, t: usize, g: &[T], acc: &mut Accumulator<'_, T>) {
    let (n, l, k) = {
        let s = acc.value(x).shape();
        (s[0], s[1], s[2])
    };
    acc.with(x, |dx| {
        for b in 0..n {
            let off = (b * l + t) * k;
            dx[off..off + k].iter_mut().zip(&g[b * k..(b + 1) * k]).for_each(|(d, &g)| *d += g);
        }
    });
}
