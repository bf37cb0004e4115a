use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{Bound, Gradients, ParamStore, Real, Tape, Tensor, Var};

/// `lr_min + ½(lr_max − lr_min)(1 + cos(πt/T))`; `T = 0` yields `lr_max`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    let t = t.min(total) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t / total as f64).cos())
}

/// Adam moments with weight decay applied directly to the weights.
#[derive(Clone, Debug)]
pub struct AdamW<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    moments: BTreeMap<usize, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Default for AdamW<T> {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Real> AdamW<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update of every trainable parameter of `store` from `grads`.
    ///
    /// `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`, with the decay computed from the
    /// pre-update weights.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, weight_decay: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0 && weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!("learning rate {lr} / weight decay {weight_decay}")));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (lr_t, decay) = (T::from_f64_lossy(lr), T::from_f64_lossy(lr * weight_decay));
        let (c1, c2, eps) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2), T::from_f64_lossy(self.eps));
        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).trainable).collect();
        for id in ids {
            let Some(g) = grads.param(id.0) else { continue };
            let p = store.value_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(id.0)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *pi = *pi - decay * *pi - lr_t * update;
            }
        }
        Ok(())
    }
}

/// `½λ Σ ‖p‖²` over the trainable parameters of `store`.
pub fn l2_term<T: Real>(tape: &mut Tape<T>, p: &Bound, store: &ParamStore<T>, lambda: f64) -> Result<Var> {
    let mut terms = Vec::new();
    if lambda != 0.0 {
        for (id, param) in store.iter() {
            if param.trainable {
                terms.push(tape.sum_sq(p[id])?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, T::from_f64_lossy(0.5 * lambda))
}
