//! Parameterized layers and the forward-pass context.

use crate::error::{shape_err, Result};
use crate::ops::norm::BatchStats;
use crate::param::{BufferId, Init, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization layers; running estimates are
    /// queued for update.
    Train,
    /// Running statistics; nothing is mutated.
    Eval,
}

/// Pending exponential-average update of one normalization layer's running
/// statistics.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate<T> {
    mean: BufferId,
    var: BufferId,
    momentum: f64,
    stats: BatchStats<T>,
}

impl<T: Real> RunningStatUpdate<T> {
    pub fn apply(&self, store: &mut ParamStore<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in store.buffer_mut(self.mean).iter_mut().zip(&self.stats.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.buffer_mut(self.var).iter_mut().zip(&self.stats.var) {
            *r = keep * *r + m * b;
        }
    }
}

/// State of one forward pass: the tape, read-only parameters and the mode.
pub struct Ctx<'s, T> {
    pub tape: Tape<T>,
    pub store: &'s ParamStore<T>,
    pub mode: Mode,
    updates: Vec<RunningStatUpdate<T>>,
}

impl<'s, T: Real> Ctx<'s, T> {
    pub fn new(store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self::with_tape(Tape::new(), store, mode)
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Self { tape, store, mode, updates: Vec::new() }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Running-statistic updates recorded by training-mode forwards.
    pub fn take_stat_updates(&mut self) -> Vec<RunningStatUpdate<T>> {
        std::mem::take(&mut self.updates)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let area = kernel * kernel;
        let weight = init.xavier("weight", &[c_out, c_in, kernel, kernel], c_in * area, c_out * area)?;
        let bias = init.constant("bias", &[c_out], 0.0)?;
        Ok(Self { weight, bias, c_in, c_out, kernel, stride, pad })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("gamma", &[channels], 1.0)?,
            beta: init.constant("beta", &[channels], 0.0)?,
            running_mean: init.buffer("running_mean", channels, 0.0)?,
            running_var: init.buffer("running_var", channels, 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let eps = T::from_f64(self.eps);
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, eps)?;
                ctx.updates.push(RunningStatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    momentum: self.momentum,
                    stats,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                let (mean, var) = (store.buffer(self.running_mean), store.buffer(self.running_var));
                ctx.tape.batch_norm_eval(x, gamma, beta, mean, var, eps)
            }
        }
    }
}

/// Convolution followed by batch normalization and, optionally, ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Real>(
        init: &mut Init<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&mut init.sub("conv"), c_in, c_out, kernel, stride, pad)?,
            bn: BatchNorm2d::new(&mut init.sub("bn"), c_out)?,
            relu: true,
        })
    }

    pub fn without_relu(mut self) -> Self {
        self.relu = false;
        self
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        if self.relu {
            ctx.tape.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// `x·W + b` with `W: D_in×D_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real>(init: &mut Init<'_, T>, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = init.xavier("weight", &[d_in, d_out], d_in, d_out)?;
        let bias = if bias { Some(init.constant("bias", &[d_out], 0.0)?) } else { None };
        Ok(Self { weight, bias, d_in, d_out })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real>(init: &mut Init<'_, T>, rows: usize, dim: usize) -> Result<Self> {
        Ok(Self { table: init.xavier("table", &[rows, dim], rows, dim)?, rows, dim })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, idx: &[usize]) -> Result<Var> {
        let table = ctx.param(self.table);
        ctx.tape.embedding(table, idx)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = σ(x·W_z + h·U_z + b_z)
/// r  = σ(x·W_r + h·U_r + b_r)
/// h̃  = tanh(x·W_h + (r∘h)·U_h + b_h)
/// h' = (1−z)∘h + z∘h̃
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub x_z: Linear,
    pub x_r: Linear,
    pub x_h: Linear,
    pub h_z: Linear,
    pub h_r: Linear,
    pub h_h: Linear,
    pub input_size: usize,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new<T: Real>(init: &mut Init<'_, T>, input_size: usize, hidden_size: usize) -> Result<Self> {
        Ok(Self {
            x_z: Linear::new(&mut init.sub("x_z"), input_size, hidden_size, true)?,
            x_r: Linear::new(&mut init.sub("x_r"), input_size, hidden_size, true)?,
            x_h: Linear::new(&mut init.sub("x_h"), input_size, hidden_size, true)?,
            h_z: Linear::new(&mut init.sub("h_z"), hidden_size, hidden_size, false)?,
            h_r: Linear::new(&mut init.sub("h_r"), hidden_size, hidden_size, false)?,
            h_h: Linear::new(&mut init.sub("h_h"), hidden_size, hidden_size, false)?,
            input_size,
            hidden_size,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (ctx.tape.shape(x).to_vec(), ctx.tape.shape(h).to_vec());
        if xs.len() != 2 || xs[1] != self.input_size || hs != [xs[0], self.hidden_size] {
            return shape_err(
                "gru_cell",
                format!("input {xs:?} / hidden {hs:?} for sizes {}/{}", self.input_size, self.hidden_size),
            );
        }
        let gate = |ctx: &mut Ctx<'_, T>, wx: &Linear, uh: &Linear| -> Result<Var> {
            let a = wx.forward(ctx, x)?;
            let b = uh.forward(ctx, h)?;
            let s = ctx.tape.add(a, b)?;
            ctx.tape.sigmoid(s)
        };
        let z = gate(ctx, &self.x_z, &self.h_z)?;
        let r = gate(ctx, &self.x_r, &self.h_r)?;
        let rh = ctx.tape.mul(r, h)?;
        let a = self.x_h.forward(ctx, x)?;
        let b = self.h_h.forward(ctx, rh)?;
        let pre = ctx.tape.add(a, b)?;
        let cand = ctx.tape.tanh(pre)?;
        let diff = ctx.tape.sub(cand, h)?;
        let step = ctx.tape.mul(z, diff)?;
        ctx.tape.add(h, step)
    }
}
