//! First-order parameter optimizers.
//!
//! Steps are pure functions of (state, params, grads): replaying the same
//! inputs on a cloned state reproduces outputs bit for bit. Weight decay is
//! coupled, added to the raw gradient before any momentum bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// SGD with Nesterov-style momentum:
/// `g' = g + wd * theta`, `v <- mu v + g'`, `theta <- theta - lr (g' + mu v)`.
/// With `mu = 0` this is plain SGD.
#[derive(Clone, Debug)]
pub struct SgdNesterov<S> {
    pub lr: S,
    pub momentum: S,
    pub weight_decay: S,
    velocity: Vec<S>,
}

impl<S: Scalar> SgdNesterov<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdNesterov {
            lr: S::of(lr),
            momentum: S::of(momentum),
            weight_decay: S::of(weight_decay),
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension {
                context: "optimizer gradient length",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = vec![S::zero(); params.len()];
        } else if self.velocity.len() != params.len() {
            return Err(Error::Dimension {
                context: "optimizer state length",
                expected: params.len(),
                actual: self.velocity.len(),
            });
        }
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let g_eff = g + self.weight_decay * *p;
            *v = self.momentum * *v + g_eff;
            *p -= self.lr * (g_eff + self.momentum * *v);
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    m: Vec<S>,
    v: Vec<S>,
    t: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr: S::of(lr),
            beta1: S::of(beta1),
            beta2: S::of(beta2),
            eps: S::of(eps),
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Standard defaults: beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn with_defaults(lr: f64) -> Self {
        Adam::new(lr, 0.9, 0.999, 1e-8)
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Dimension {
                context: "optimizer gradient length",
                expected: params.len(),
                actual: grads.len(),
            });
        }
        if self.m.is_empty() {
            self.m = vec![S::zero(); params.len()];
            self.v = vec![S::zero(); params.len()];
        } else if self.m.len() != params.len() {
            return Err(Error::Dimension {
                context: "optimizer state length",
                expected: params.len(),
                actual: self.m.len(),
            });
        }
        self.t += 1;
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdNesterov,
    Adam,
}

/// Kind-erased optimizer for code paths configured at runtime.
#[derive(Clone, Debug)]
pub enum Optimizer<S> {
    SgdNesterov(SgdNesterov<S>),
    Adam(Adam<S>),
}

impl<S: Scalar> Optimizer<S> {
    /// Builds an optimizer of the given kind. Momentum and weight decay
    /// apply to the Nesterov variant; Adam runs with its default moment
    /// coefficients.
    pub fn from_kind(kind: OptimizerKind, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::SgdNesterov => {
                Optimizer::SgdNesterov(SgdNesterov::new(lr, momentum, weight_decay))
            }
            OptimizerKind::Adam => Optimizer::Adam(Adam::with_defaults(lr)),
        }
    }

    pub fn step(&mut self, params: &mut [S], grads: &[S]) -> Result<()> {
        match self {
            Optimizer::SgdNesterov(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }

    pub fn lr(&self) -> S {
        match self {
            Optimizer::SgdNesterov(o) => o.lr,
            Optimizer::Adam(o) => o.lr,
        }
    }

    pub fn set_lr(&mut self, lr: S) {
        match self {
            Optimizer::SgdNesterov(o) => o.lr = lr,
            Optimizer::Adam(o) => o.lr = lr,
        }
    }
}
