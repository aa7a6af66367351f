//! ADADELTA optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::real::Real;

/// ADADELTA hyper-parameters. The per-parameter accumulators live on
/// [`crate::param::Parameter`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaDelta {
    pub rho: f64,
    pub eps: f64,
}

impl Default for AdaDelta {
    fn default() -> Self {
        Self { rho: 0.9, eps: 1e-6 }
    }
}

impl AdaDelta {
    /// One in-place update of every parameter:
    ///
    /// ```text
    /// E[g²]  ← ρ·E[g²] + (1−ρ)·g²
    /// Δx     = −√(E[Δx²]+ε) / √(E[g²]+ε) · g
    /// E[Δx²] ← ρ·E[Δx²] + (1−ρ)·Δx²
    /// x      ← x + lr_scale·Δx
    /// ```
    ///
    /// Gradients are left in place; callers zero them.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, lr_scale: f64) -> Result<()> {
        if let Some(p) = store.params().iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        let rho = T::from_f64(self.rho);
        let one_minus_rho = T::from_f64(1.0 - self.rho);
        let eps = T::from_f64(self.eps);
        let lr = T::from_f64(lr_scale);
        for p in store.params_mut() {
            let grad = p.grad.as_deref().expect("checked above");
            let values = p.value.data_mut();
            for i in 0..values.len() {
                let g = grad[i];
                let eg = rho * p.accum_grad_sq[i] + one_minus_rho * g * g;
                let dx = -((p.accum_update_sq[i] + eps).sqrt() / (eg + eps).sqrt()) * g;
                p.accum_grad_sq[i] = eg;
                p.accum_update_sq[i] = rho * p.accum_update_sq[i] + one_minus_rho * dx * dx;
                values[i] += lr * dx;
            }
        }
        Ok(())
    }
}
