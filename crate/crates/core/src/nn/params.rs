use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::checkpoint::{Checkpoint, StoredTensor, TensorData};
use crate::{Error, Result};

/// Named trainable parameters.
///
/// Each parameter draws its initial values from a generator seeded by the
/// store seed and the parameter name, so a parameter starts identical in
/// every model that registers it, whatever else is built around it. Names
/// are kept in a `BTreeMap` so iteration order (optimizer state,
/// checkpoints) does not depend on construction order.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    seed: u64,
}

/// FNV-1a; stable across platforms and toolchains.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Invalid(format!("parameter `{name}` registered twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        self.insert(name, values, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.insert(name, vec![0.0; shape.iter().product()], shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.insert(name, vec![1.0; shape.iter().product()], shape)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place; every tensor handle sharing it sees the update.
    pub fn set(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter `{name}`")))?;
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    pub fn values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter `{name}`")))?;
        Ok(var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub fn to_checkpoint(&self, manifest: String) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(manifest);
        for (name, var) in &self.vars {
            let flat = var.as_tensor().flatten_all()?;
            let data = match self.dtype {
                DType::F64 => TensorData::F64(flat.to_vec1()?),
                _ => TensorData::F32(flat.to_dtype(DType::F32)?.to_vec1()?),
            };
            ck.insert(name.clone(), StoredTensor { shape: var.dims().to_vec(), data });
        }
        Ok(ck)
    }

    /// Load every parameter from `ck`. With `strict`, the name sets must match
    /// exactly; otherwise parameters absent from the checkpoint keep their values.
    pub fn load_checkpoint(&self, ck: &Checkpoint, strict: bool) -> Result<usize> {
        if strict {
            for name in ck.tensors.keys() {
                if !self.vars.contains_key(name) {
                    return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
                }
            }
        }
        let mut loaded = 0;
        for (name, var) in &self.vars {
            let Some(stored) = ck.tensors.get(name) else {
                if strict {
                    return Err(Error::Checkpoint(format!("missing tensor `{name}`")));
                }
                continue;
            };
            if stored.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for `{name}`: {:?} vs {:?}",
                    stored.shape,
                    var.dims()
                )));
            }
            let t = match &stored.data {
                TensorData::F32(v) => Tensor::from_slice(v, var.shape(), &self.device)?,
                TensorData::F64(v) => Tensor::from_slice(v, var.shape(), &self.device)?,
            };
            var.set(&t.to_dtype(self.dtype)?)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}
