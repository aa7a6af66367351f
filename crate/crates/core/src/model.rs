//! The full recognizer: encoder, merging head and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::charset::Charset;
use crate::config::Config;
use crate::decoder::{encode_targets, Decoder, DecoderConfig, TeacherForced};
use crate::encoder::{Encoder, EncoderOutput};
use crate::error::{shape_err, Result};
use crate::merging::MergingHead;
use crate::nn::{Ctx, Mode};
use crate::param::{Init, ParamStore};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Psan {
    pub cfg: Config,
    pub charset: Charset,
    pub encoder: Encoder,
    pub head: MergingHead,
    pub decoder: Decoder,
}

/// Everything a forward pass produced.
#[derive(Clone, Debug)]
pub struct Forward {
    pub encoder: EncoderOutput,
    /// `N×MaxLength×K`.
    pub steps: Var,
}

impl Psan {
    /// Registers all parameters in `store`, drawing initial values from `rng`.
    pub fn new<T: Real>(cfg: &Config, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(store, rng);
        let enc_cfg = cfg.encoder();
        let encoder = Encoder::new(&mut init.sub("encoder"), &enc_cfg)?;
        let channels: Vec<usize> = (0..cfg.num_scales).map(|i| enc_cfg.output_channels(i)).collect();
        let head = MergingHead::new(&mut init.sub("head"), &channels, cfg.max_length)?;
        let dcfg = DecoderConfig {
            hidden_size: cfg.hidden_size,
            embedding_dim: cfg.embedding_dim,
            k: cfg.k(),
            max_length: cfg.max_length,
        };
        let decoder = Decoder::new(&mut init.sub("decoder"), dcfg)?;
        Ok(Self { cfg: cfg.clone(), charset: Charset::new(), encoder, head, decoder })
    }

    /// Fresh parameters seeded from `cfg.seed`.
    pub fn init<T: Real>(cfg: &Config) -> Result<(ParamStore<T>, Self)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Self::new(cfg, &mut store, &mut rng)?;
        Ok((store, model))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Forward> {
        match *ctx.tape.shape(images) {
            [_, 3, h, w] if h == self.cfg.input_height && w == self.cfg.input_width => {}
            ref s => {
                return shape_err(
                    "model",
                    format!("images {s:?}, expected N×3×{}×{}", self.cfg.input_height, self.cfg.input_width),
                )
            }
        }
        let encoder = self.encoder.forward(ctx, images)?;
        let steps = self.head.forward(ctx, &encoder.features)?;
        Ok(Forward { encoder, steps })
    }

    pub fn targets(&self, labels: &[impl AsRef<str>]) -> Result<Vec<Vec<usize>>> {
        encode_targets(&self.charset, labels, self.cfg.max_length)
    }

    /// Teacher-forced loss on a labelled batch.
    pub fn loss<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: Var, targets: &[Vec<usize>]) -> Result<TeacherForced> {
        let fwd = self.forward(ctx, images)?;
        self.decoder.teacher_forced(ctx, fwd.steps, targets)
    }

    /// Greedy transcriptions of an `N×3×H×W` batch with running statistics.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<String>> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let x = ctx.tape.constant(images.clone());
        let fwd = self.forward(&mut ctx, x)?;
        let classes = self.decoder.greedy(&mut ctx, fwd.steps)?;
        Ok(classes.iter().map(|c| self.charset.decode(c)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Config {
        Config {
            base_channels: 2,
            rus_per_rs: 1,
            vab_convs: 1,
            hidden_size: 8,
            embedding_dim: 4,
            max_length: 6,
            max_label_len: 4,
            ..Config::default()
        }
    }

    #[test]
    fn end_to_end_shapes() {
        let cfg = small();
        let (store, model) = Psan::init::<f32>(&cfg).unwrap();
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx.tape.constant(Tensor::full(&[2, 3, 32, 128], 0.1));
        let fwd = model.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(fwd.steps), &[2, 6, 64]);
        let targets = model.targets(&["ab", "c"]).unwrap();
        let tf = model.decoder.teacher_forced(&mut ctx, fwd.steps, &targets).unwrap();
        assert!(ctx.tape.value(tf.loss).data()[0] > 0.0);
    }

    #[test]
    fn predictions_respect_max_length() {
        let cfg = small();
        let (store, model) = Psan::init::<f32>(&cfg).unwrap();
        let out = model.predict(&store, &Tensor::zeros(&[3, 3, 32, 128])).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|s| s.chars().count() <= 6));
    }

    #[test]
    fn rejects_wrong_image_size() {
        let (store, model) = Psan::init::<f32>(&small()).unwrap();
        assert!(model.predict(&store, &Tensor::zeros(&[1, 3, 32, 64])).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, _) = Psan::init::<f32>(&small()).unwrap();
        let (b, _) = Psan::init::<f32>(&small()).unwrap();
        for (p, q) in a.params().iter().zip(b.params()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
    }
}
