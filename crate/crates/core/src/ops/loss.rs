//! Summed negative log-likelihood over a decoded sequence.

use crate::error::{arg_err, shape_err, Result};
use crate::real::Real;
use crate::tape::{Accumulator, Op, Tape, Var};
use crate::tensor::Tensor;

use super::dense::softmax_in_place;

pub(crate) struct SeqNllSaved<T> {
    logits: Vec<Var>,
    probs: Vec<Vec<T>>,
    targets: Vec<Vec<usize>>,
    classes: usize,
}

impl<T: Real> Tape<T> {
    /// Mean over the batch of `−Σ_t log softmax(logits_t)[target_t]`.
    ///
    /// `logits[t]` is `N×V`; `targets[n]` lists sample `n`'s classes for its
    /// first `targets[n].len()` steps. Later steps are excluded.
    pub fn sequence_nll(&mut self, logits: &[Var], targets: &[Vec<usize>]) -> Result<Var> {
        let Some(&first) = logits.first() else {
            return arg_err("sequence_nll", "empty sequence");
        };
        let (n, v) = match *self.shape(first) {
            [n, v] => (n, v),
            ref s => return shape_err("sequence_nll", format!("logits must be N×V, got {s:?}")),
        };
        if targets.len() != n {
            return shape_err("sequence_nll", format!("{} target rows for batch of {n}", targets.len()));
        }
        for (i, t) in targets.iter().enumerate() {
            if t.is_empty() || t.len() > logits.len() {
                return shape_err(
                    "sequence_nll",
                    format!("sample {i} has {} targets for {} steps", t.len(), logits.len()),
                );
            }
            if let Some(&bad) = t.iter().find(|&&c| c >= v) {
                return arg_err("sequence_nll", format!("class {bad} out of range for {v} classes"));
            }
        }
        let mut probs = Vec::with_capacity(logits.len());
        let mut total = T::zero();
        for (step, &l) in logits.iter().enumerate() {
            if self.shape(l) != [n, v] {
                return shape_err("sequence_nll", format!("step {step} has shape {:?}", self.shape(l)));
            }
            let lv = self.value(l).data();
            let mut p = lv.to_vec();
            for (b, row) in p.chunks_mut(v).enumerate() {
                softmax_in_place(row);
                if let Some(&c) = targets[b].get(step) {
                    let r = &lv[b * v..(b + 1) * v];
                    let m = r.iter().copied().fold(T::neg_infinity(), T::max);
                    let lse = m + r.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
                    total += lse - r[c];
                }
            }
            probs.push(p);
        }
        let loss = total / T::from_f64(n as f64);
        let saved = SeqNllSaved { logits: logits.to_vec(), probs, targets: targets.to_vec(), classes: v };
        self.push(Tensor::scalar(loss), Op::SeqNll(saved), logits)
    }
}

pub(crate) fn backward<T: Real>(s: &SeqNllSaved<T>, g: T, acc: &mut Accumulator<'_, T>) {
    let n = s.targets.len();
    let scale = g / T::from_f64(n as f64);
    for (step, (&l, p)) in s.logits.iter().zip(&s.probs).enumerate() {
        acc.with(l, |dl| {
            for (b, t) in s.targets.iter().enumerate() {
                let Some(&c) = t.get(step) else { continue };
                let row = &mut dl[b * s.classes..(b + 1) * s.classes];
                for (k, d) in row.iter_mut().enumerate() {
                    let onehot = if k == c { T::one() } else { T::zero() };
                    *d += scale * (p[b * s.classes + k] - onehot);
                }
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_two_class_step() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(&[1, 2]), true);
        let loss = tape.sequence_nll(&[l], &[vec![0]]).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn saturated_margin_gives_tiny_loss() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_f64(&[1, 3], &[50., 0., 0.]).unwrap(), true);
        let b = tape.leaf(Tensor::from_f64(&[1, 3], &[0., 0., 50.]).unwrap(), true);
        let loss = tape.sequence_nll(&[a, b], &[vec![0, 2]]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-6);
    }

    #[test]
    fn steps_past_target_end_are_ignored() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2]), true);
        let b = tape.leaf(Tensor::from_f64(&[1, 2], &[3.0, -7.0]).unwrap(), true);
        let loss = tape.sequence_nll(&[a, b], &[vec![1]]).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(b).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_targets_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[1, 2]), true);
        assert!(tape.sequence_nll(&[a], &[vec![2]]).is_err());
        assert!(tape.sequence_nll(&[a], &[vec![0, 1]]).is_err());
        assert!(tape.sequence_nll(&[a], &[vec![0], vec![1]]).is_err());
    }
}
