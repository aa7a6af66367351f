//! GRU decoder over the merging head's step vectors.

use crate::charset::Charset;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Ctx, Embedding, GruCell, Linear};
use crate::param::Init;
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub hidden_size: usize,
    pub embedding_dim: usize,
    /// Width of one step vector.
    pub k: usize,
    pub max_length: usize,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embedding: Embedding,
    pub gru: GruCell,
    pub classifier: Linear,
}

/// Loss and per-step logits of a teacher-forced pass.
#[derive(Clone, Debug)]
pub struct TeacherForced {
    pub loss: Var,
    pub logits: Vec<Var>,
}

/// Class sequences of a batch of labels, each terminated by end-of-sequence.
pub fn encode_targets(charset: &Charset, labels: &[impl AsRef<str>], max_length: usize) -> Result<Vec<Vec<usize>>> {
    labels
        .iter()
        .map(|label| {
            let mut classes = charset.encode(label.as_ref())?;
            if classes.len() + 1 > max_length {
                return Err(Error::LabelTooLong { len: classes.len(), max: max_length.saturating_sub(1) });
            }
            classes.push(Charset::EOS);
            Ok(classes)
        })
        .collect()
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Decoder {
    pub fn new<T: Real>(init: &mut Init<'_, T>, cfg: DecoderConfig) -> Result<Self> {
        Ok(Self {
            cfg,
            embedding: Embedding::new(&mut init.sub("embedding"), Charset::NUM_EMBEDDINGS, cfg.embedding_dim)?,
            gru: GruCell::new(&mut init.sub("gru"), cfg.embedding_dim + cfg.k, cfg.hidden_size)?,
            classifier: Linear::new(&mut init.sub("classifier"), cfg.hidden_size, Charset::NUM_CLASSES, true)?,
        })
    }

    fn check_input<T: Real>(&self, ctx: &Ctx<'_, T>, fmh: Var) -> Result<usize> {
        match *ctx.tape.shape(fmh) {
            [n, l, k] if l == self.cfg.max_length && k == self.cfg.k => Ok(n),
            ref s => {
                shape_err("decoder", format!("step tensor {s:?}, expected N×{}×{}", self.cfg.max_length, self.cfg.k))
            }
        }
    }

    /// One recurrence: returns the new hidden state and the step's logits.
    pub fn step<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        fmh: Var,
        t: usize,
        prev: &[usize],
        h: Var,
    ) -> Result<(Var, Var)> {
        let emb = self.embedding.forward(ctx, prev)?;
        let channel = ctx.tape.select_step(fmh, t)?;
        let input = ctx.tape.concat_channels(&[emb, channel])?;
        let h = self.gru.forward(ctx, input, h)?;
        let logits = self.classifier.forward(ctx, h)?;
        Ok((h, logits))
    }

    /// Teacher-forced unroll over `targets` (each ending with
    /// end-of-sequence) with the summed sequence loss.
    pub fn teacher_forced<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        fmh: Var,
        targets: &[Vec<usize>],
    ) -> Result<TeacherForced> {
        let n = self.check_input(ctx, fmh)?;
        if targets.len() != n {
            return shape_err("decoder", format!("{} targets for batch of {n}", targets.len()));
        }
        let steps = targets.iter().map(Vec::len).max().unwrap_or(0);
        if steps == 0 || steps > self.cfg.max_length {
            return Err(Error::LabelTooLong { len: steps.saturating_sub(1), max: self.cfg.max_length - 1 });
        }
        let mut h = ctx.tape.constant(Tensor::zeros(&[n, self.cfg.hidden_size]));
        let mut logits = Vec::with_capacity(steps);
        for t in 0..steps {
            let prev: Vec<usize> = targets
                .iter()
                .map(|tg| if t == 0 { Charset::SOS } else { tg.get(t - 1).copied().unwrap_or(Charset::EOS) })
                .collect();
            let (h_next, l) = self.step(ctx, fmh, t, &prev, h)?;
            h = h_next;
            logits.push(l);
        }
        let loss = ctx.tape.sequence_nll(&logits, targets)?;
        Ok(TeacherForced { loss, logits })
    }

    /// Greedy decoding; each result excludes the end-of-sequence class and
    /// has at most `max_length` entries.
    pub fn greedy<T: Real>(&self, ctx: &mut Ctx<'_, T>, fmh: Var) -> Result<Vec<Vec<usize>>> {
        let n = self.check_input(ctx, fmh)?;
        let mut out = vec![Vec::new(); n];
        let mut done = vec![false; n];
        let mut prev = vec![Charset::SOS; n];
        let mut h = ctx.tape.constant(Tensor::zeros(&[n, self.cfg.hidden_size]));
        for t in 0..self.cfg.max_length {
            let (h_next, logits) = self.step(ctx, fmh, t, &prev, h)?;
            h = h_next;
            let lv = ctx.tape.value(logits).data();
            for (b, row) in lv.chunks(Charset::NUM_CLASSES).enumerate() {
                if done[b] {
                    continue;
                }
                let c = argmax(row);
                prev[b] = c;
                if c == Charset::EOS {
                    done[b] = true;
                } else {
                    out[b].push(c);
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }
}
