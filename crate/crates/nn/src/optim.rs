//! First-order optimizers.

use crate::error::{shape_err, NnError, Result};
use crate::params::{Gradients, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state; Adam moments mirror the parameter shapes.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
    steps: u64,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.len() > store.len() {
            return Err(NnError::GraphState(
                "gradients do not belong to this parameter store".into(),
            ));
        }
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            if g.shape() != store.get(id).shape() {
                return shape_err(format!(
                    "gradient for {} has shape {:?}, parameter {:?}",
                    store.name(id),
                    g.shape(),
                    store.get(id).shape()
                ));
            }
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for id in store.ids().collect::<Vec<_>>() {
                    if let Some(g) = grads.get(id).filter(|_| store.is_trainable(id)) {
                        for (p, &d) in store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                            *p = T::from_f64(p.as_f64() - self.lr * d.as_f64());
                        }
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() < store.len() {
                    self.first.resize(store.len(), None);
                    self.second.resize(store.len(), None);
                }
                let t = self.steps as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for id in store.ids().collect::<Vec<_>>() {
                    let Some(g) = grads.get(id).filter(|_| store.is_trainable(id)) else {
                        continue;
                    };
                    let i = id.index();
                    let m = self.first[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self.second[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
                    let params = store.get_mut(id).data_mut();
                    for k in 0..params.len() {
                        let d = g.data()[k].as_f64();
                        let mk = self.beta1 * m.data()[k].as_f64() + (1.0 - self.beta1) * d;
                        let vk = self.beta2 * v.data()[k].as_f64() + (1.0 - self.beta2) * d * d;
                        m.data_mut()[k] = T::from_f64(mk);
                        v.data_mut()[k] = T::from_f64(vk);
                        let update = self.lr * (mk / c1) / ((vk / c2).sqrt() + self.eps);
                        params[k] = T::from_f64(params[k].as_f64() - update);
                    }
                }
            }
        }
        Ok(())
    }
}
