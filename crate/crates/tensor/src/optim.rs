//! SGD with momentum and AdamW, applied per parameter group.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Hyper {
    /// `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`.
    SgdMomentum {
        lr: f64,
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    /// Adam moments with decoupled decay `p ← p − lr·λ·p`.
    Adamw {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Hyper {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Hyper::SgdMomentum {
            lr,
            momentum,
            weight_decay,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Hyper::Adamw {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Hyper::SgdMomentum { lr, .. } | Hyper::Adamw { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Hyper::SgdMomentum {
                lr,
                momentum,
                weight_decay,
            } => lr > 0.0 && (0.0..1.0).contains(&momentum) && weight_decay >= 0.0,
            Hyper::Adamw {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                lr > 0.0
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
                    && weight_decay >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(TensorError::Parameter(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Sgd { velocity: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

/// Optimizer state for one parameter group.
#[derive(Debug, Clone)]
pub struct Optimizer {
    hyper: Hyper,
    slots: HashMap<ParamId, Slot>,
}

impl Optimizer {
    pub fn new(hyper: Hyper) -> Self {
        Optimizer {
            hyper,
            slots: HashMap::new(),
        }
    }

    pub fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.hyper {
            Hyper::SgdMomentum { lr, .. } | Hyper::Adamw { lr, .. } => *lr = new_lr,
        }
    }

    /// Updates one tensor from its populated `grad`, then clears the grad.
    pub fn step_tensor(&mut self, key: ParamId, p: &mut Tensor) -> Result<()> {
        let g = p
            .grad
            .take()
            .ok_or_else(|| TensorError::Contract("optimizer step without gradient".into()))?;
        let n = p.numel();
        match self.hyper {
            Hyper::SgdMomentum {
                lr,
                momentum,
                weight_decay,
            } => {
                let slot = self.slots.entry(key).or_insert_with(|| Slot::Sgd {
                    velocity: vec![0.0; n],
                });
                let Slot::Sgd { velocity } = slot else {
                    unreachable!("slot kind fixed by hyper")
                };
                for ((w, v), gi) in p.data_mut().iter_mut().zip(velocity.iter_mut()).zip(&g) {
                    let d = gi + weight_decay * *w;
                    *v = momentum * *v + d;
                    *w -= lr * *v;
                }
            }
            Hyper::Adamw {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let slot = self.slots.entry(key).or_insert_with(|| Slot::Adam {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                });
                let Slot::Adam { m, v, t } = slot else {
                    unreachable!("slot kind fixed by hyper")
                };
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t);
                let bc2 = 1.0 - beta2.powi(*t);
                for (i, w) in p.data_mut().iter_mut().enumerate() {
                    *w -= lr * weight_decay * *w;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    *w -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Steps every parameter of `group` that received a gradient this round.
    /// Frozen groups are skipped and their gradients discarded.
    pub fn step_group(&mut self, store: &mut ParamStore, group: &str) -> Result<()> {
        let ids: Vec<ParamId> = store.group_ids(group).collect();
        let frozen = store.is_group_frozen(group);
        for id in ids {
            let p = store.get_mut(id);
            if frozen {
                p.grad = None;
                continue;
            }
            if p.grad.is_some() {
                self.step_tensor(id, p)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::scalar(value).with_requires_grad(true);
        t.grad = Some(vec![grad]);
        t
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = Optimizer::new(Hyper::sgd(0.1, 0.0, 0.0));
        let mut p = one(1.0, 2.0);
        opt.step_tensor(ParamId(0), &mut p).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = 1, v2 = 0.9·1 + 1 = 1.9; steps of lr·v.
        let mut opt = Optimizer::new(Hyper::sgd(0.1, 0.9, 0.0));
        let mut p = one(0.0, 1.0);
        opt.step_tensor(ParamId(0), &mut p).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-15);
        p.grad = Some(vec![1.0]);
        opt.step_tensor(ParamId(0), &mut p).unwrap();
        assert!((p.item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn adamw_zero_gradient_only_decays() {
        let mut opt = Optimizer::new(Hyper::adamw(1e-4, 0.01));
        let mut p = one(3.0, 0.0);
        opt.step_tensor(ParamId(0), &mut p).unwrap();
        assert!((p.item() - 3.0 * (1.0 - 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let mut opt = Optimizer::new(Hyper::adamw(1e-3, 0.0));
        let mut p = Tensor::scalar(1.0);
        assert!(matches!(
            opt.step_tensor(ParamId(0), &mut p),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn frozen_group_is_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("w", "snn", Tensor::full(&[3], 0.5));
        store.get_mut(id).grad = Some(vec![1.0; 3]);
        store.set_group_frozen("snn", true);
        store.get_mut(id).grad = Some(vec![1.0; 3]);
        let before = store.get(id).clone();
        let mut opt = Optimizer::new(Hyper::sgd(0.1, 0.9, 0.0));
        opt.step_group(&mut store, "snn").unwrap();
        assert_eq!(store.get(id).data(), before.data());
        assert!(store.get(id).grad.is_none());
        store.set_group_frozen("snn", false);
        store.get_mut(id).grad = Some(vec![1.0; 3]);
        opt.step_group(&mut store, "snn").unwrap();
        assert_ne!(store.get(id).data(), before.data());
    }

    #[test]
    fn hyper_deserializes_from_tagged_json() {
        let h: Hyper = serde_json::from_str(r#"{"kind":"adamw","lr":0.001,"weight_decay":0.01}"#).unwrap();
        assert_eq!(h, Hyper::adamw(1e-3, 0.01));
        let bad = serde_json::from_str::<Hyper>(r#"{"kind":"adamw","lr":0.001,"momentun":0.9}"#);
        assert!(bad.is_err());
    }
}
