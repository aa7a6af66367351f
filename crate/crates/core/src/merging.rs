//! Merging head: pools every scale to the deepest resolution, concatenates,
//! convolves to one channel per decoding step and flattens each channel.

use crate::error::{shape_err, Result};
use crate::nn::{ConvBn, Ctx};
use crate::param::Init;
use crate::real::Real;
use crate::tape::Var;

#[derive(Clone, Debug)]
pub struct MergingHead {
    pub conv: ConvBn,
    pub num_scales: usize,
    pub max_length: usize,
}

impl MergingHead {
    /// `channels[i]` is the channel count of scale `i`'s output.
    pub fn new<T: Real>(init: &mut Init<'_, T>, channels: &[usize], max_length: usize) -> Result<Self> {
        let total = channels.iter().sum();
        Ok(Self {
            conv: ConvBn::new(&mut init.sub("conv"), total, max_length, 3, 1, 1)?,
            num_scales: channels.len(),
            max_length,
        })
    }

    /// `K` for a given deepest-scale resolution.
    pub fn k(deep_h: usize, deep_w: usize) -> usize {
        deep_h * deep_w
    }

    /// Features of every scale to `N×MaxLength×K`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, features: &[Var]) -> Result<Var> {
        if features.len() != self.num_scales {
            return shape_err("mh_forward", format!("{} feature maps for {} scales", features.len(), self.num_scales));
        }
        let last = self.num_scales - 1;
        let pooled = features
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let k = 1 << (last - i);
                if k == 1 {
                    Ok(f)
                } else {
                    ctx.tape.maxpool2d(f, k, k)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let merged = ctx.tape.concat_channels(&pooled)?;
        let y = self.conv.forward(ctx, merged)?;
        let (n, l, h, w) = match *ctx.tape.shape(y) {
            [n, l, h, w] => (n, l, h, w),
            ref s => return shape_err("mh_forward", format!("unexpected conv output {s:?}")),
        };
        ctx.tape.reshape(y, &[n, l, h * w])
    }
}
