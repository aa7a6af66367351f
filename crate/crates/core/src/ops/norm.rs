//! Per-channel batch normalization over `N×C×H×W` tensors.

use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;
use crate::tape::{Accumulator, Op, Tape, Var};
use crate::tensor::{Dims4, Tensor};

pub(crate) struct BatchNormSaved<T> {
    x: Var,
    gamma: Var,
    beta: Var,
    dims: Dims4,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Statistics of one training-mode normalization, used to update the
/// running estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (Bessel-corrected) variance.
    pub var: Vec<T>,
}

impl<T: Real> Tape<T> {
    /// Normalizes with the batch's own statistics (training mode).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let d = self.check_bn(x, gamma, beta)?;
        let m = d.n * d.plane();
        if m < 2 {
            return arg_err("batchnorm2d", "training mode needs at least two values per channel");
        }
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); d.c];
        let mut var = vec![T::zero(); d.c];
        let mf = T::from_f64(m as f64);
        for c in 0..d.c {
            let mut s = T::zero();
            for n in 0..d.n {
                let off = (n * d.c + c) * d.plane();
                s += xv[off..off + d.plane()].iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut ss = T::zero();
            for n in 0..d.n {
                let off = (n * d.c + c) * d.plane();
                ss += xv[off..off + d.plane()].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            mean[c] = mu;
            var[c] = ss / mf;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let unbiased = var.iter().map(|&v| v * mf / T::from_f64((m - 1) as f64)).collect();
        let out = self.normalize(x, gamma, beta, d, &mean, &inv_std, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Normalizes with fixed running statistics (evaluation mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Result<Var> {
        let d = self.check_bn(x, gamma, beta)?;
        if running_mean.len() != d.c || running_var.len() != d.c {
            return shape_err("batchnorm2d", "running statistics do not match the channel count");
        }
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, d, running_mean, &inv_std, false)
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<Dims4> {
        let d = Dims4::of("batchnorm2d", self.shape(x))?;
        if self.shape(gamma) != [d.c] || self.shape(beta) != [d.c] {
            return shape_err("batchnorm2d", format!("affine parameters must have shape [{}]", d.c));
        }
        Ok(d)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        d: Dims4,
        mean: &[T],
        inv_std: &[T],
        batch_stats: bool,
    ) -> Result<Var> {
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..d.n {
            for c in 0..d.c {
                let off = (n * d.c + c) * d.plane();
                for i in off..off + d.plane() {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        let saved = BatchNormSaved { x, gamma, beta, dims: d, xhat, inv_std: inv_std.to_vec(), batch_stats };
        self.push(value, Op::BatchNorm(saved), &[x, gamma, beta])
    }
}

pub(crate) fn backward<T: Real>(s: &BatchNormSaved<T>, g: &[T], acc: &mut Accumulator<'_, T>) {
    let d = s.dims;
    let plane = d.plane();
    let mut sum_g = vec![T::zero(); d.c];
    let mut sum_gx = vec![T::zero(); d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let off = (n * d.c + c) * plane;
            for (&gi, &xi) in g[off..off + plane].iter().zip(&s.xhat[off..off + plane]) {
                sum_g[c] += gi;
                sum_gx[c] += gi * xi;
            }
        }
    }
    acc.add(s.gamma, &sum_gx);
    acc.add(s.beta, &sum_g);
    if !acc.wants(s.x) {
        return;
    }
    let gamma = acc.value(s.gamma).data().to_vec();
    let mf = T::from_f64((d.n * plane) as f64);
    acc.with(s.x, |dx| {
        for n in 0..d.n {
            for c in 0..d.c {
                let k = gamma[c] * s.inv_std[c];
                let off = (n * d.c + c) * plane;
                for i in off..off + plane {
                    dx[i] +=
                        if s.batch_stats { k * (g[i] - sum_g[c] / mf - s.xhat[i] * sum_gx[c] / mf) } else { k * g[i] };
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| ((i * 7919) % 101) as f64 / 13.0 - 3.0).collect();
        Tensor::from_f64(shape, &data).unwrap()
    }

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(sample(&[2, 3, 4, 4]), false);
        let g = tape.leaf(Tensor::ones(&[3]), false);
        let b = tape.leaf(Tensor::zeros(&[3]), false);
        let (y, _) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        let yv = tape.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..16).map(move |i| (n, i)))
                .map(|(n, i)| yv.data()[(n * 3 + c) * 16 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_mode_with_identity_statistics_is_identity() {
        let mut tape = Tape::<f64>::new();
        let xt = sample(&[1, 2, 3, 3]);
        let x = tape.leaf(xt.clone(), false);
        let g = tape.leaf(Tensor::ones(&[2]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let y = tape.batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0, 1.0], 1e-5).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(xt.data()) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_value_per_channel_is_rejected_in_train_mode() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 1, 1]), false);
        let g = tape.leaf(Tensor::ones(&[2]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        assert!(tape.batch_norm_train(x, g, b, 1e-5).is_err());
    }

    #[test]
    fn batch_stats_report_unbiased_variance() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 1, 1, 2], &[1.0, 3.0]).unwrap(), false);
        let g = tape.leaf(Tensor::ones(&[1]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let (_, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![2.0]);
    }
}
