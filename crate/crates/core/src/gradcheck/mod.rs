//! Central finite differences as an independent gradient oracle.

pub mod suite;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a−b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn checked(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { op: "finite-difference objective".into() })
    }
}

/// `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε` for every coordinate `i`.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let hi = checked(f(&probe)?)?;
        probe.data_mut()[i] = orig - eps;
        let lo = checked(f(&probe)?)?;
        probe.data_mut()[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    Tensor::new(x.shape(), out)
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub eps: f64,
    /// Coordinates checked per input; `None` checks all of them.
    pub sample_per_input: Option<usize>,
    pub seed: u64,
    /// How many times ε is divided by ten when a probe crosses a ReLU or
    /// max-pool switch before the coordinate is skipped.
    pub refinements: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { eps: 1e-4, sample_per_input: None, seed: 0, refinements: 2 }
    }
}

/// Worst disagreement between back-propagated and finite-difference
/// gradients.
#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// Coordinates at which every probe crossed a non-differentiable switch.
    pub skipped: usize,
}

/// Compares `backward()` against central differences for a scalar function
/// of several tensors. `build` records the function on the given tape from
/// one leaf per input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], opts: &CheckOptions, mut build: F) -> Result<CheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let base_sig = tape.branch_signature();
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut eval = |point: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((checked(tape.value(loss).data()[0])?, tape.branch_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut point = inputs.to_vec();
    let mut report = CheckReport::default();
    for k in 0..inputs.len() {
        let n = inputs[k].numel();
        let coords: Vec<usize> = match opts.sample_per_input {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = point[k].data()[i];
            let mut eps = opts.eps;
            let mut numeric = None;
            for _ in 0..=opts.refinements {
                point[k].data_mut()[i] = orig + eps;
                let (hi, s_hi) = eval(&point)?;
                point[k].data_mut()[i] = orig - eps;
                let (lo, s_lo) = eval(&point)?;
                point[k].data_mut()[i] = orig;
                if s_hi == base_sig && s_lo == base_sig {
                    numeric = Some((hi - lo) / (2.0 * eps));
                    break;
                }
                eps /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            report.checked += 1;
            let a = analytic[k][i];
            let err = relative_error(a, numeric);
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}
