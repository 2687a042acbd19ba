//! First-order optimizers over a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    step: u64,
    /// First moment (Adam) or velocity (SGD).
    first: BTreeMap<String, Tensor>,
    /// Second moment (Adam only).
    second: BTreeMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f32) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::config_key("optim.lr", "learning rate must be positive"));
        }
        Ok(Optimizer {
            kind,
            learning_rate,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter with an entry in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradMap) -> Result<()> {
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
            let p = params
                .get(name)
                .map_err(|_| Error::config(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} does not match parameter `{name}` {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let first = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((p, v), &g) in p.data_mut().iter_mut().zip(first.data_mut()).zip(g.data()) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let second = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let bc1 = 1.0 - beta1.powi(self.step as i32);
                    let bc2 = 1.0 - beta2.powi(self.step as i32);
                    for (((p, m), v), &g) in p
                        .data_mut()
                        .iter_mut()
                        .zip(first.data_mut())
                        .zip(second.data_mut())
                        .zip(g.data())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *p -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("parameter `{name}` became non-finite")));
            }
        }
        Ok(())
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state_tensors(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in &self.first {
            out.insert(format!("{prefix}m/{k}"), v.clone());
        }
        for (k, v) in &self.second {
            out.insert(format!("{prefix}v/{k}"), v.clone());
        }
        out.insert(format!("{prefix}step"), Tensor::scalar(self.step as f32));
        out
    }

    pub fn load_state(&mut self, store: &ParamStore, prefix: &str) -> Result<()> {
        let step = store.get(&format!("{prefix}step"))?.item();
        self.step = step as u64;
        self.first.clear();
        self.second.clear();
        let m = format!("{prefix}m/");
        let v = format!("{prefix}v/");
        for (k, t) in store.iter() {
            if let Some(name) = k.strip_prefix(&m) {
                self.first.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(&v) {
                self.second.insert(name.to_string(), t.clone());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f32) -> (ParamStore, GradMap) {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(value));
        (p, GradMap::new())
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut p, mut g) = single(1.5);
        g.insert("w".into(), Tensor::scalar(0.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn plain_sgd_step() {
        let (mut p, mut g) = single(1.0);
        g.insert("w".into(), Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 0.1).unwrap();
        opt.step(&mut p, &g).unwrap();
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let (mut p, mut g) = single(0.0);
        g.insert("w".into(), Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, 1.0).unwrap();
        opt.step(&mut p, &g).unwrap();
        opt.step(&mut p, &g).unwrap();
        // v1 = 1, v2 = 1.5
        assert!((p.get("w").unwrap().item() + 2.5).abs() < 1e-6);
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let (mut p, mut g) = single(1.0);
        g.insert("w".into(), Tensor::scalar(1.0));
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1).unwrap();
        opt.step(&mut p, &g).unwrap();
        // m_hat = v_hat = 1, so the update is lr / (1 + eps).
        let expect = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - expect).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut p, mut g) = single(1.0);
        g.insert("w".into(), Tensor::scalar(f32::NAN));
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.1).unwrap();
        let err = opt.step(&mut p, &g).unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("`w`")));
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn learning_rate_must_be_positive() {
        assert!(Optimizer::new(OptimizerKind::adam(), 0.0).is_err());
    }

    #[test]
    fn state_round_trips() {
        let (mut p, mut g) = single(1.0);
        g.insert("w".into(), Tensor::scalar(0.3));
        let mut opt = Optimizer::new(OptimizerKind::adam(), 0.01).unwrap();
        opt.step(&mut p, &g).unwrap();
        let saved = opt.state_tensors("optim/");
        let mut restored = Optimizer::new(OptimizerKind::adam(), 0.01).unwrap();
        restored.load_state(&saved, "optim/").unwrap();
        assert_eq!(restored, opt);
    }
}
