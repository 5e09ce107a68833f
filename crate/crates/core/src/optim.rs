//! Adam with L2 weight decay, and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::network::ParamStore;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every_epochs: usize,
    pub lr_floor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimizer steps per epoch; `None` means one pass over the training split.
    pub steps_per_epoch: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-3,
            weight_decay: 1e-4,
            lr_decay_factor: 10.0,
            lr_decay_every_epochs: 2,
            lr_floor: 1e-7,
            epochs: 8,
            batch_size: 2,
            steps_per_epoch: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    // Negated comparisons so that NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor < self.lr) {
            return bad(format!("lr_floor {} must be in [0, lr)", self.lr_floor));
        }
        if !(self.lr_decay_factor >= 1.0) || self.lr_decay_every_epochs == 0 {
            return bad("lr_decay_factor must be >= 1 and lr_decay_every_epochs >= 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return bad("epochs, batch_size and steps_per_epoch must be >= 1".into());
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must be in [0, 1) and eps > 0".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial: self.lr,
            factor: self.lr_decay_factor,
            every: self.lr_decay_every_epochs,
            floor: self.lr_floor,
        }
    }
}

/// `lr(e) = max(initial / factor^floor(e / every), floor)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub every: usize,
    pub floor: f64,
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        let drops = (epoch / self.every).min(i32::MAX as usize) as i32;
        (self.initial / self.factor.powi(drops)).max(self.floor)
    }
}

/// First and second moment estimates, aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: &OptimConfig, params: &ParamStore<T>) -> Self {
        Adam {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            state: AdamState { step: 0, m: params.zeros_like(), v: params.zeros_like() },
        }
    }

    /// Restores moments saved by a checkpoint; layout must match `params`.
    pub fn restore(&mut self, state: AdamState<T>, params: &ParamStore<T>) -> Result<()> {
        let fits = |s: &[Vec<T>]| {
            s.len() == params.len() && s.iter().zip(params.tensors()).all(|(a, t)| a.len() == t.data.len())
        };
        if !fits(&state.m) || !fits(&state.v) {
            return Err(Error::Config("optimizer state does not match network parameters".into()));
        }
        self.state = state;
        Ok(())
    }

    /// One update. The decay term is added to the gradient (L2, not decoupled).
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::mismatch("adam step", params.len(), grads.len()));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for (((tensor, g), m), v) in
            params.tensors_mut().iter_mut().zip(grads).zip(&mut self.state.m).zip(&mut self.state.v)
        {
            if g.len() != tensor.data.len() {
                return Err(Error::mismatch("adam step", tensor.data.len(), g.len()));
            }
            for (((p, &gi), mi), vi) in tensor.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let grad = gi.as_f64() + wd * p.as_f64();
                let m_new = b1 * mi.as_f64() + (1.0 - b1) * grad;
                let v_new = b2 * vi.as_f64() + (1.0 - b2) * grad * grad;
                *mi = T::of(m_new);
                *vi = T::of(v_new);
                let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
                *p = T::of(p.as_f64() - update);
            }
        }
        Ok(())
    }
}
