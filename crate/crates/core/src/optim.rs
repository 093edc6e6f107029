//! Adam with bias correction.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Module, Param};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Slot<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First/second moment buffers per named parameter plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    t: u64,
    slots: HashMap<String, Slot<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr >= 0.0) || !config.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be >= 0", config.lr)));
        }
        Ok(Self {
            config,
            t: 0,
            slots: HashMap::new(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// One update over every parameter of `module` using its stored
    /// gradients. Fails, leaving the parameters untouched, if any gradient
    /// is missing a finite value.
    pub fn step(&mut self, module: &mut dyn Module<T>) -> Result<()> {
        let mut bad = None;
        let mut seen = std::collections::HashSet::new();
        let mut dup = None;
        module.visit_params(&mut |p| {
            if !seen.insert(p.name.clone()) && dup.is_none() {
                dup = Some(p.name.clone());
            }
            if bad.is_none() {
                if let Some(g) = &p.grad {
                    if g.shape() != p.value.shape() || !g.all_finite() {
                        bad = Some(p.name.clone());
                    }
                }
            }
        });
        if let Some(name) = dup {
            return Err(Error::Config(format!("parameter name `{name}` is not unique")));
        }
        if let Some(name) = bad {
            return Err(Error::NonFiniteGrad { name });
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.config.beta1), T::of(self.config.beta2));
        let lr = T::of(self.config.lr);
        let eps = T::of(self.config.eps);
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        let slots = &mut self.slots;
        module.visit_params_mut(&mut |p: &mut Param<T>| {
            let n = p.numel();
            let slot = slots.entry(p.name.clone()).or_insert_with(|| Slot {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
            });
            let Some(g) = &p.grad else { return };
            let w = p.value.data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                slot.m[i] = b1 * slot.m[i] + (T::one() - b1) * gi;
                slot.v[i] = b2 * slot.v[i] + (T::one() - b2) * gi * gi;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                w[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        Ok(())
    }

    /// First and second moment buffers of a parameter, if it has a slot.
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.slots.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }
}
