//! Named, seeded parameter storage.
//!
//! candle's CPU RNG cannot be seeded, so parameters are drawn from a ChaCha
//! stream owned by the store; identical seeds and construction order give
//! identical models.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self::with_dtype(seed, DType::F32)
    }

    pub fn with_dtype(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            bail!(Config, "duplicate parameter name `{name}`");
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let v = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        self.insert(name, v, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let v = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        self.insert(name, v, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![value; n], shape)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if values.len() != shape.iter().product::<usize>() {
            bail!(Shape, "parameter `{name}`: {} values for shape {shape:?}", values.len());
        }
        self.insert(name, values, shape)
    }

    /// Raw normal draws that do not become parameters (used for structured
    /// initialisations such as orthonormal projections).
    pub fn draw_normal(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every parameter from `values`; names and shapes must match
    /// exactly.
    pub fn load(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.vars {
            let t = values
                .get(name)
                .ok_or_else(|| crate::Error::Corrupt(format!("missing parameter `{name}`")))?;
            if t.shape() != var.shape() {
                bail!(
                    Corrupt,
                    "parameter `{name}`: stored shape {:?} != model shape {:?}",
                    t.shape(),
                    var.shape()
                );
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = values.keys().find(|k| !self.vars.contains_key(*k)) {
            bail!(Corrupt, "unexpected parameter `{extra}`");
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian f32 values, in name order.
    pub fn digest(&self) -> Result<[u8; 32]> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let v = var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
        Ok(h.finalize().into())
    }
}
