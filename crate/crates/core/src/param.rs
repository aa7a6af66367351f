//! Named parameters, persistent buffers and their initialization.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(usize);

/// A learnable tensor with its gradient slot and ADADELTA accumulators.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    /// Running average of squared gradients, `E[g²]`.
    pub accum_grad_sq: Vec<T>,
    /// Running average of squared updates, `E[Δx²]`.
    pub accum_update_sq: Vec<T>,
}

/// Non-learnable persistent state, e.g. batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
enum Slot {
    Param(ParamId),
    Buffer(BufferId),
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, Slot>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), buffers: Vec::new(), names: HashMap::new() }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(Error::Config(format!("duplicate tensor name `{name}`")));
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        let id = ParamId(self.params.len());
        self.claim(name, Slot::Param(id))?;
        let n = value.numel();
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
            accum_grad_sq: vec![T::zero(); n],
            accum_update_sq: vec![T::zero(); n],
        });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: &str, value: Vec<T>) -> Result<BufferId> {
        let id = BufferId(self.buffers.len());
        self.claim(name, Slot::Buffer(id))?;
        self.buffers.push(Buffer { name: name.to_string(), value });
        Ok(id)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &[T] {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Vec<T> {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer<T>] {
        &mut self.buffers
    }

    pub fn param_id(&self, name: &str) -> Result<ParamId> {
        match self.names.get(name) {
            Some(Slot::Param(id)) => Ok(*id),
            _ => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn buffer_id(&self, name: &str) -> Result<BufferId> {
        match self.names.get(name) {
            Some(Slot::Buffer(id)) => Ok(*id),
            _ => Err(Error::UnknownParam(name.to_string())),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Sets every gradient slot to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.fill(T::zero()),
                None => p.grad = Some(vec![T::zero(); p.value.numel()]),
            }
        }
    }

    /// Adds the parameter gradients of a backward pass into the gradient
    /// slots. Parameters the loss did not reach end up with zero gradients.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>) {
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(vec![T::zero(); p.value.numel()]);
            }
        }
        for (id, g) in grads.params() {
            if let (Some(g), Some(slot)) = (g, self.params[id.0].grad.as_mut()) {
                slot.iter_mut().zip(g).for_each(|(s, &g)| *s += g);
            }
        }
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect::<Vec<U>>();
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_deref().map(conv),
                    accum_grad_sq: conv(&p.accum_grad_sq),
                    accum_update_sq: conv(&p.accum_update_sq),
                })
                .collect(),
            buffers: self.buffers.iter().map(|b| Buffer { name: b.name.clone(), value: conv(&b.value) }).collect(),
            names: self.names.clone(),
        }
    }
}

/// Creates named parameters under a dotted path prefix.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        let prefix = self.path(name);
        Init { store: &mut *self.store, rng: &mut *self.rng, prefix }
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Zero-mean uniform weights with bound `√(6/(fan_in+fan_out))`. Values
    /// are drawn in `f64` so both precisions start from the same model.
    pub fn xavier(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::from_f64(self.rng.gen_range(-bound..bound))).collect();
        let path = self.path(name);
        self.store.add_param(&path, Tensor::new(shape, data)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let path = self.path(name);
        self.store.add_param(&path, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn buffer(&mut self, name: &str, len: usize, value: f64) -> Result<BufferId> {
        let path = self.path(name);
        self.store.add_buffer(&path, vec![T::from_f64(value); len])
    }
}
