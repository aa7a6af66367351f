//! Mini-batch training with ADADELTA and the epoch-based step schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::dataset::Dataset;
use crate::data::transform::Transform;
use crate::error::{Error, Result};
use crate::model::Psan;
use crate::nn::{Ctx, Mode};
use crate::optim::AdaDelta;
use crate::param::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr_scale: f64,
}

pub struct Trainer<T> {
    pub model: Psan,
    pub store: ParamStore<T>,
    pub optimizer: AdaDelta,
    /// Steps completed so far.
    pub step: usize,
}

/// Called once per completed epoch with the trainer and the 1-based epoch.
pub type EpochHook<'a, T> = dyn FnMut(&Trainer<T>, usize) -> Result<()> + 'a;

impl<T: Real> Trainer<T> {
    pub fn new(cfg: &Config) -> Result<Self> {
        let (store, model) = Psan::init(cfg)?;
        Ok(Self::from_parts(model, store))
    }

    pub fn from_parts(model: Psan, store: ParamStore<T>) -> Self {
        let optimizer = AdaDelta { rho: model.cfg.rho, eps: model.cfg.eps };
        Self { model, store, optimizer, step: 0 }
    }

    pub fn cfg(&self) -> &Config {
        &self.model.cfg
    }

    /// Forward, backward and one optimizer step on a batch; returns the loss.
    pub fn train_step(&mut self, images: &Tensor<T>, targets: &[Vec<usize>], lr_scale: f64) -> Result<f64> {
        let (loss, grads, updates) = {
            let mut ctx = Ctx::new(&self.store, Mode::Train);
            let x = ctx.tape.constant(images.clone());
            let tf = self.model.loss(&mut ctx, x, targets)?;
            let loss = ctx.tape.value(tf.loss).data()[0].as_f64();
            let updates = ctx.take_stat_updates();
            let grads = ctx.tape.backward(tf.loss)?;
            (loss, grads, updates)
        };
        self.store.zero_grad();
        self.store.accumulate_grads(&grads);
        if let Some(p) =
            self.store.params().iter().find(|p| p.grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(Error::NonFinite { op: format!("gradient of {}", p.name) });
        }
        self.optimizer.step(&mut self.store, lr_scale)?;
        for u in &updates {
            u.apply(&mut self.store);
        }
        self.store.zero_grad();
        self.step += 1;
        Ok(loss)
    }

    /// Runs the configured number of epochs (or `max_steps`) over `data`,
    /// reshuffling every epoch from the master seed.
    pub fn fit(
        &mut self,
        data: &Dataset,
        on_step: &mut dyn FnMut(&StepMetrics) -> Result<()>,
        on_epoch: &mut EpochHook<'_, T>,
    ) -> Result<Vec<StepMetrics>> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cfg = self.cfg().clone();
        let images = (0..data.len())
            .map(|i| data.sample(i, Transform::None).map(|s| s.image.cast::<T>()))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<&str> = data.records.iter().map(|r| r.label.as_str()).collect();
        let targets = self.model.targets(&labels)?;
        let per_image = images[0].numel();
        let mut log = Vec::new();
        'epochs: for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
            let lr_scale = cfg.lr_scale(epoch);
            for chunk in order.chunks(cfg.batch_size) {
                if cfg.max_steps.is_some_and(|m| self.step >= m) {
                    break 'epochs;
                }
                let mut buf = Vec::with_capacity(chunk.len() * per_image);
                for &i in chunk {
                    buf.extend_from_slice(images[i].data());
                }
                let mut shape = vec![chunk.len()];
                shape.extend_from_slice(images[0].shape());
                let batch = Tensor::new(&shape, buf)?;
                let batch_targets: Vec<Vec<usize>> = chunk.iter().map(|&i| targets[i].clone()).collect();
                let loss = self.train_step(&batch, &batch_targets, lr_scale)?;
                let m = StepMetrics { step: self.step, epoch, loss, lr_scale };
                on_step(&m)?;
                log.push(m);
            }
            on_epoch(self, epoch)?;
        }
        Ok(log)
    }
}
