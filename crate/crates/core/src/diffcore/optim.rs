use super::graph::Gradients;
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    RmsProp { decay: f64, eps: f64 },
}

/// Optimizer hyperparameters plus any per-parameter state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    accumulators: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be > 0, got {lr}")));
        }
        if let OptimizerKind::RmsProp { decay, eps } = kind {
            if !(0.0..1.0).contains(&decay) || !(eps > 0.0) {
                return Err(Error::contract(format!(
                    "RMSProp needs decay in [0,1) and eps > 0, got {decay}, {eps}"
                )));
            }
        }
        Ok(Self {
            kind,
            lr,
            accumulators: Vec::new(),
        })
    }

    pub fn sgd(lr: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn rmsprop(lr: f64, decay: f64, eps: f64) -> Result<Self> {
        Self::new(OptimizerKind::RmsProp { decay, eps }, lr)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Squared-gradient running average for a parameter index, if any.
    pub fn accumulator(&self, index: usize) -> Option<&[f64]> {
        self.accumulators.get(index).map(Vec::as_slice)
    }

    /// SGD: `w ← w − η·g`. RMSProp: `a ← ρ·a + (1−ρ)·g²`, `w ← w − η·g/√(a+ε)`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if let OptimizerKind::RmsProp { .. } = self.kind {
            if self.accumulators.len() != store.len() {
                self.accumulators = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
            }
        }
        for (id, grad) in grads.iter() {
            if !store.requires_grad(id) {
                continue;
            }
            let param = store.get_mut(id);
            if param.shape() != grad.shape() {
                return Err(Error::contract(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in param.data_mut().iter_mut().zip(grad.data()) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::RmsProp { decay, eps } => {
                    let acc = &mut self.accumulators[id.0];
                    for ((w, g), a) in param.data_mut().iter_mut().zip(grad.data()).zip(acc.iter_mut()) {
                        *a = decay * *a + (1.0 - decay) * g * g;
                        *w -= self.lr * g / (*a + eps).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}
