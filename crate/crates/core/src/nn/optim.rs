use serde::{Deserialize, Serialize};

use super::{Group, Matrix, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// `v <- a v + (1 - a) g^2`, `p <- p - lr g / sqrt(v + eps)`.
    RmsProp { alpha: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn rmsprop() -> Self {
        OptimizerKind::RmsProp {
            alpha: 0.99,
            eps: 1e-5,
        }
    }
}

/// Optimizer over one parameter group.
#[derive(Clone, Debug)]
pub struct Optimizer<S> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub group: Group,
    step: u64,
    ids: Vec<ParamId>,
    first: Vec<Matrix<S>>,
    second: Vec<Matrix<S>>,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(kind: OptimizerKind, lr: f64, group: Group, store: &ParamStore<S>) -> Self {
        let ids = store.ids_in(group);
        let zeros = |id: &ParamId| {
            let (r, c) = store.tensor(*id).shape();
            Matrix::zeros(r, c)
        };
        let first = match kind {
            OptimizerKind::Adam { .. } => ids.iter().map(zeros).collect(),
            OptimizerKind::RmsProp { .. } => Vec::new(),
        };
        let second = ids.iter().map(zeros).collect();
        Self {
            kind,
            lr,
            group,
            step: 0,
            ids,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Named moment buffers, for checkpointing.
    pub fn state(&self) -> (u64, &[Matrix<S>], &[Matrix<S>]) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore_state(&mut self, step: u64, first: Vec<Matrix<S>>, second: Vec<Matrix<S>>) -> Result<()> {
        if first.len() != self.first.len() || second.len() != self.second.len() {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        for (a, b) in self.first.iter().zip(&first).chain(self.second.iter().zip(&second)) {
            if a.shape() != b.shape() {
                return Err(Error::Checkpoint("optimizer state shape mismatch".into()));
            }
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update to every parameter of the group, then clears the
    /// group's gradients. Fails before touching anything if a gradient is
    /// missing.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if let Some(id) = self.ids.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(Error::Contract(format!(
                "parameter {} has no gradient",
                store.get(*id).name
            )));
        }
        self.step += 1;
        let lr = S::from_f64_lossy(self.lr);
        match self.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = S::from_f64_lossy(1.0 - beta1.powi(t));
                let bc2 = S::from_f64_lossy(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (
                    S::from_f64_lossy(beta1),
                    S::from_f64_lossy(beta2),
                    S::from_f64_lossy(eps),
                );
                for (slot, &id) in self.ids.iter().enumerate() {
                    let p = store.get_mut(id);
                    let g = p.grad.take().unwrap();
                    let m = self.first[slot].as_mut_slice();
                    let v = self.second[slot].as_mut_slice();
                    for (((w, &gi), mi), vi) in
                        p.tensor.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m).zip(v)
                    {
                        *mi = b1 * *mi + (S::one() - b1) * gi;
                        *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::RmsProp { alpha, eps } => {
                let (a, eps) = (S::from_f64_lossy(alpha), S::from_f64_lossy(eps));
                for (slot, &id) in self.ids.iter().enumerate() {
                    let p = store.get_mut(id);
                    let g = p.grad.take().unwrap();
                    let v = self.second[slot].as_mut_slice();
                    for ((w, &gi), vi) in p.tensor.as_mut_slice().iter_mut().zip(g.as_slice()).zip(v) {
                        *vi = a * *vi + (S::one() - a) * gi * gi;
                        *w -= lr * gi / (*vi + eps).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}
