use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{bail, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay. State is exposed as named tensors so it
/// can be checkpointed.
pub struct AdamW {
    cfg: AdamWConfig,
    names: Vec<String>,
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Result<Self> {
        let mut names = Vec::new();
        let mut vars = Vec::new();
        let mut m = Vec::new();
        for (name, var) in store.vars() {
            names.push(name.clone());
            vars.push(var.clone());
            m.push(var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            cfg,
            names,
            v: m.clone(),
            m,
            vars,
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Updates every parameter that has a gradient; others are left alone.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powf(self.t as f64);
        let bc2 = 1.0 - beta2.powf(self.t as f64);
        for i in 0..self.vars.len() {
            let var = &self.vars[i];
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Leaf gradients still carry the forward graph; keeping them in
            // the moments would chain every step's graph together.
            let g = &g.detach();
            let m = ((&self.m[i] * beta1)? + (g * (1.0 - beta1))?)?;
            let v = ((&self.v[i] * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((&v * (1.0 / bc2))?.sqrt()? + eps)?;
            let update = (m.div(&denom)? * (lr / bc1))?;
            let decayed = (var.as_tensor() * (1.0 - lr * weight_decay))?;
            var.set(&(decayed - update)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, n) in self.names.iter().enumerate() {
            out.insert(format!("m/{n}"), self.m[i].clone());
            out.insert(format!("v/{n}"), self.v[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, steps_taken: u64) -> Result<()> {
        for (i, n) in self.names.iter().enumerate() {
            for (key, slot) in [(format!("m/{n}"), &mut self.m[i]), (format!("v/{n}"), &mut self.v[i])] {
                let t = state
                    .get(&key)
                    .ok_or_else(|| crate::Error::Corrupt(format!("optimizer state lacks `{key}`")))?;
                if t.shape() != slot.shape() {
                    bail!(Corrupt, "optimizer state `{key}` has shape {:?}", t.dims());
                }
                *slot = t.to_dtype(slot.dtype())?;
            }
        }
        if state.len() != 2 * self.names.len() {
            bail!(Corrupt, "optimizer state has {} entries, expected {}", state.len(), 2 * self.names.len());
        }
        self.t = steps_taken;
        Ok(())
    }
}
