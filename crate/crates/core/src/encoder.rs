//! Multi-scale encoder: stem, parallel scale branches of residual units,
//! visual attention blocks and repeated all-to-all fusion.
//!
//! Scales are 0-indexed here. Scale `i` runs at `H/2^(i+1) × W/2^(i+1)` with
//! `C·2^i` internal channels, and its output concatenates the branch with its
//! attention output, giving `C·2^(i+1)` channels.
//!
//! Stage `s` of the forward pass:
//!
//! ```text
//! s = 0:  x0 = RS(stem(img));            a0 = VAB(x0)
//! s ≥ 1:  xs = down(x_{s-1})             one stride-2 conv from the scale above
//!         xi = RS(xi)   for every i ≤ s
//!         as = VAB(xs)
//!         xi = Σ_j path_{j→i}(xj)        full exchange, own term unchanged
//! out_i = concat(xi, ai)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::nn::{Conv2d, ConvBn, Ctx};
use crate::param::Init;
use crate::real::Real;
use crate::tape::Var;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub base_channels: usize,
    pub num_scales: usize,
    pub rus_per_rs: usize,
    pub vab_enabled: bool,
    pub vab_convs: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { base_channels: 8, num_scales: 3, rus_per_rs: 5, vab_enabled: true, vab_convs: 4 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return arg_err("encoder", "base_channels must be at least 1");
        }
        if !(1..=4).contains(&self.num_scales) {
            return arg_err("encoder", format!("num_scales {} outside 1..=4", self.num_scales));
        }
        if !(1..=6).contains(&self.rus_per_rs) {
            return arg_err("encoder", format!("rus_per_rs {} outside 1..=6", self.rus_per_rs));
        }
        Ok(())
    }

    /// Internal channel count of scale `i`.
    pub fn internal_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Output channel count of scale `i`.
    pub fn output_channels(&self, i: usize) -> usize {
        self.base_channels << (i + 1)
    }

    /// Every output shape for an `h×w` input, `(channels, height, width)`.
    pub fn output_shapes(&self, h: usize, w: usize) -> Vec<(usize, usize, usize)> {
        (0..self.num_scales).map(|i| (self.output_channels(i), h >> (i + 1), w >> (i + 1))).collect()
    }

    /// The input size must halve cleanly once per scale plus once for the
    /// stem.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return shape_err("stem", format!("input {h}×{w} has an odd dimension"));
        }
        let unit = 1 << self.num_scales;
        if !h.is_multiple_of(unit) || !w.is_multiple_of(unit) {
            return shape_err(
                "encoder",
                format!("input {h}×{w} is not divisible by {unit} for {} scales", self.num_scales),
            );
        }
        Ok(())
    }
}

/// 1×1 reduce, 3×3, 1×1 expand, with an identity skip added before the last
/// ReLU.
#[derive(Clone, Debug)]
pub struct ResidualUnit {
    pub reduce: ConvBn,
    pub mid: ConvBn,
    pub expand: ConvBn,
}

impl ResidualUnit {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize) -> Result<Self> {
        let inner = (channels / 2).max(1);
        Ok(Self {
            reduce: ConvBn::new(&mut init.sub("reduce"), channels, inner, 1, 1, 0)?,
            mid: ConvBn::new(&mut init.sub("mid"), inner, inner, 3, 1, 1)?,
            expand: ConvBn::new(&mut init.sub("expand"), inner, channels, 1, 1, 0)?.without_relu(),
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(ctx, x)?;
        let y = self.mid.forward(ctx, y)?;
        let y = self.expand.forward(ctx, y)?;
        let y = ctx.tape.add(y, x)?;
        ctx.tape.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct ResidualStructure {
    pub units: Vec<ResidualUnit>,
}

impl ResidualStructure {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, units: usize) -> Result<Self> {
        let units =
            (0..units).map(|u| ResidualUnit::new(&mut init.sub(&format!("ru{u}")), channels)).collect::<Result<_>>()?;
        Ok(Self { units })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, mut x: Var) -> Result<Var> {
        for unit in &self.units {
            x = unit.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Visual attention block: a stack of 3×3 convs predicts a one-channel
/// segmentation map that gates the block's input, followed by a 3×3
/// channel-adjust conv.
#[derive(Clone, Debug)]
pub struct Vab {
    pub convs: Vec<ConvBn>,
    pub seg: Conv2d,
    pub adjust: ConvBn,
}

/// Intermediate values of one attention pass.
#[derive(Clone, Copy, Debug)]
pub struct VabTrace {
    pub out: Var,
    /// Pre-sigmoid segmentation logits, `N×1×H×W`.
    pub logits: Var,
    /// Segmentation map, `N×1×H×W`.
    pub sm: Var,
    /// Input gated by the map, before the channel-adjust conv.
    pub gated: Var,
}

impl Vab {
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: usize, depth: usize) -> Result<Self> {
        let convs = (0..depth)
            .map(|d| ConvBn::new(&mut init.sub(&format!("conv{d}")), channels, channels, 3, 1, 1))
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            seg: Conv2d::new(&mut init.sub("seg"), channels, 1, 1, 1, 0)?,
            adjust: ConvBn::new(&mut init.sub("adjust"), channels, channels, 3, 1, 1)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.trace(ctx, x)?.out)
    }

    pub fn trace<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<VabTrace> {
        let mut y = x;
        for conv in &self.convs {
            y = conv.forward(ctx, y)?;
        }
        let logits = self.seg.forward(ctx, y)?;
        self.finish(ctx, x, logits)
    }

    /// Completes the block from given segmentation logits.
    pub fn finish<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, logits: Var) -> Result<VabTrace> {
        let sm = ctx.tape.sigmoid(logits)?;
        let gated = ctx.tape.gate_multiply(x, sm)?;
        let out = self.adjust.forward(ctx, gated)?;
        Ok(VabTrace { out, logits, sm, gated })
    }
}

/// What runs beside each scale's main branch.
#[derive(Clone, Debug)]
pub enum SideBranch {
    Vab(Vab),
    /// Single 3×3 conv of equal width, used when attention is disabled.
    Plain(ConvBn),
}

impl SideBranch {
    fn new<T: Real>(init: &mut Init<'_, T>, cfg: &EncoderConfig, channels: usize) -> Result<Self> {
        Ok(if cfg.vab_enabled {
            SideBranch::Vab(Vab::new(&mut init.sub("vab"), channels, cfg.vab_convs)?)
        } else {
            SideBranch::Plain(ConvBn::new(&mut init.sub("plain"), channels, channels, 3, 1, 1)?)
        })
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Option<VabTrace>)> {
        match self {
            SideBranch::Vab(v) => {
                let t = v.trace(ctx, x)?;
                Ok((t.out, Some(t)))
            }
            SideBranch::Plain(c) => Ok((c.forward(ctx, x)?, None)),
        }
    }
}

/// Carries features from scale `from` to scale `to`.
#[derive(Clone, Debug)]
pub enum FusePath {
    /// `to − from` stride-2 3×3 convs.
    Down(Vec<ConvBn>),
    /// 1×1 conv, then bilinear upsampling by `factor`.
    Up { conv: ConvBn, factor: usize },
}

impl FusePath {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &EncoderConfig, from: usize, to: usize) -> Result<Self> {
        let (c_from, c_to) = (cfg.internal_channels(from), cfg.internal_channels(to));
        if to > from {
            let steps = to - from;
            let convs = (0..steps)
                .map(|k| {
                    let c_out = if k + 1 == steps { c_to } else { c_from };
                    ConvBn::new(&mut init.sub(&format!("down{k}")), c_from, c_out, 3, 2, 1)
                })
                .collect::<Result<_>>()?;
            Ok(FusePath::Down(convs))
        } else {
            Ok(FusePath::Up {
                conv: ConvBn::new(&mut init.sub("up"), c_from, c_to, 1, 1, 0)?,
                factor: 1 << (from - to),
            })
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            FusePath::Down(convs) => {
                let mut y = x;
                for c in convs {
                    y = c.forward(ctx, y)?;
                }
                Ok(y)
            }
            FusePath::Up { conv, factor } => {
                let y = conv.forward(ctx, x)?;
                ctx.tape.bilinear_upsample(y, *factor)
            }
        }
    }
}

/// Full exchange among the first `n` scales.
#[derive(Clone, Debug)]
pub struct Fusion {
    /// `paths[to]` lists `(from, path)` for every other scale.
    pub paths: Vec<Vec<(usize, FusePath)>>,
}

impl Fusion {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &EncoderConfig, n: usize) -> Result<Self> {
        let mut paths = Vec::with_capacity(n);
        for to in 0..n {
            let mut row = Vec::new();
            for from in (0..n).filter(|&f| f != to) {
                row.push((from, FusePath::new(&mut init.sub(&format!("s{from}_to_s{to}")), cfg, from, to)?));
            }
            paths.push(row);
        }
        Ok(Self { paths })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, xs: &[Var]) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(xs.len());
        for (to, row) in self.paths.iter().enumerate() {
            let mut acc = xs[to];
            for (from, path) in row {
                let y = path.forward(ctx, xs[*from])?;
                if ctx.tape.shape(y) != ctx.tape.shape(acc) {
                    return shape_err(
                        "inter_scale_fuse",
                        format!("s{from}→s{to} gives {:?}, target is {:?}", ctx.tape.shape(y), ctx.tape.shape(acc)),
                    );
                }
                acc = ctx.tape.add(acc, y)?;
            }
            out.push(acc);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    /// Creates the newest scale from the one above it; absent in stage 0.
    pub transition: Option<ConvBn>,
    /// One residual structure per active scale.
    pub rs: Vec<ResidualStructure>,
    /// Side branch of the newest scale.
    pub side: SideBranch,
    pub fusion: Option<Fusion>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub stem: ConvBn,
    pub stages: Vec<Stage>,
}

/// Encoder outputs plus the attention internals of every scale.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub features: Vec<Var>,
    pub vab: Vec<Option<VabTrace>>,
}

impl Encoder {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let stem = ConvBn::new(&mut init.sub("stem"), 3, c, 3, 2, 1)?;
        let mut stages = Vec::with_capacity(cfg.num_scales);
        for s in 0..cfg.num_scales {
            let mut si = init.sub(&format!("stage{s}"));
            let transition = if s == 0 {
                None
            } else {
                let (c_in, c_out) = (cfg.internal_channels(s - 1), cfg.internal_channels(s));
                Some(ConvBn::new(&mut si.sub("transition"), c_in, c_out, 3, 2, 1)?)
            };
            let rs = (0..=s)
                .map(|i| {
                    ResidualStructure::new(&mut si.sub(&format!("rs{i}")), cfg.internal_channels(i), cfg.rus_per_rs)
                })
                .collect::<Result<_>>()?;
            let side = SideBranch::new(&mut si, cfg, cfg.internal_channels(s))?;
            let fusion = if s == 0 { None } else { Some(Fusion::new(&mut si.sub("fusion"), cfg, s + 1)?) };
            stages.push(Stage { transition, rs, side, fusion });
        }
        Ok(Self { cfg: cfg.clone(), stem, stages })
    }

    /// `N×3×H×W` image batch to `N×C×H/2×W/2`.
    pub fn stem<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        match *ctx.tape.shape(image) {
            [_, 3, h, w] if h % 2 == 0 && w % 2 == 0 => self.stem.forward(ctx, image),
            [_, 3, h, w] => shape_err("stem", format!("input {h}×{w} has an odd dimension")),
            ref s => shape_err("stem", format!("expected N×3×H×W, got {s:?}")),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<EncoderOutput> {
        if let [_, _, h, w] = *ctx.tape.shape(image) {
            self.cfg.check_input(h, w)?;
        }
        let x = self.stem(ctx, image)?;
        self.forward_from_stem(ctx, x)
    }

    pub fn forward_from_stem<T: Real>(&self, ctx: &mut Ctx<'_, T>, stem_out: Var) -> Result<EncoderOutput> {
        let mut xs: Vec<Var> = Vec::with_capacity(self.stages.len());
        let mut sides = Vec::with_capacity(self.stages.len());
        let mut traces = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            match &stage.transition {
                None => xs.push(stem_out),
                Some(t) => {
                    let new = t.forward(ctx, xs[s - 1])?;
                    xs.push(new);
                }
            }
            for (x, rs) in xs.iter_mut().zip(&stage.rs) {
                let before = ctx.tape.shape(*x).to_vec();
                *x = rs.forward(ctx, *x)?;
                debug_assert_eq!(ctx.tape.shape(*x), before.as_slice());
            }
            let (side, trace) = stage.side.forward(ctx, xs[s])?;
            sides.push(side);
            traces.push(trace);
            if let Some(f) = &stage.fusion {
                xs = f.forward(ctx, &xs)?;
            }
        }
        let features =
            xs.into_iter().zip(sides).map(|(x, a)| ctx.tape.concat_channels(&[x, a])).collect::<Result<_>>()?;
        Ok(EncoderOutput { features, vab: traces })
    }
}
