//! SGD with momentum and a milestone learning-rate schedule: the rate is
//! divided by 10 at each configured epoch.

use super::{s, Network, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SgdMomentum<F> {
    pub base_lr: f64,
    pub momentum: f64,
    /// Epochs (1-based) at which the learning rate is divided by 10.
    pub milestones: Vec<usize>,
    velocity: Vec<Vec<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(base_lr: f64, momentum: f64, milestones: Vec<usize>) -> Result<Self> {
        if base_lr <= 0.0 {
            return Err(Error::invalid(format!("learning rate {base_lr} must be > 0")));
        }
        Ok(SgdMomentum {
            base_lr,
            momentum,
            milestones,
            velocity: Vec::new(),
        })
    }

    /// Effective learning rate at an epoch: base / 10^(milestones passed).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base_lr * 0.1f64.powi(passed as i32)
    }

    /// One update: v <- momentum*v + g; p <- p - lr(epoch)*v. Gradients are
    /// cleared afterwards. A non-finite gradient aborts, naming the
    /// parameter.
    pub fn step(&mut self, net: &mut Network<F>, epoch: usize) -> Result<()> {
        let lr: F = s(self.lr_at(epoch));
        let momentum: F = s(self.momentum);
        if self.velocity.is_empty() {
            net.visit_params(&mut |_, t| self.velocity.push(vec![F::zero(); t.len()]));
        }
        let mut slot = 0usize;
        let mut err: Option<Error> = None;
        let velocity = &mut self.velocity;
        net.visit_params(&mut |name, t| {
            if err.is_some() {
                return;
            }
            let Some(v) = velocity.get_mut(slot) else {
                err = Some(Error::invalid(format!("optimizer state missing for `{name}`")));
                return;
            };
            slot += 1;
            let grads = t.grad.as_ref().expect("parameter gradient buffer");
            if grads.iter().any(|g| !g.is_finite()) {
                err = Some(Error::NonFiniteGrad { param: name });
                return;
            }
            for ((vi, gi), pi) in v.iter_mut().zip(grads.iter()).zip(t.data.iter_mut()) {
                *vi = momentum * *vi + *gi;
                *pi = *pi - lr * *vi;
            }
            t.zero_grad();
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
