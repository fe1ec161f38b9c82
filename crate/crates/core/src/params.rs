//! Seeded parameter storage.
//!
//! Every trainable tensor lives in a [`ParamStore`] keyed by a dotted name. Initialization draws
//! from a ChaCha stream so two stores built with the same seed hold identical values, which the
//! default candle initializers do not guarantee.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::Linear;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::error::{Error, Result};

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    /// Registers `values` under `name`, replacing any previous tensor.
    pub fn insert(&mut self, name: &str, values: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&values.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Internal(e.to_string()))?;
        let data: Vec<f32> = (0..count)
            .map(|_| dist.sample(&mut self.rng) as f32)
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        use rand::Rng;
        let count: usize = shape.iter().product();
        let data: Vec<f32> = (0..count)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F32, &self.device)? * value)?;
        self.insert(name, t)
    }

    /// A dense layer with the usual fan-in uniform initialization and zero bias.
    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let b = self.constant(&format!("{name}.bias"), &[out_dim], 0.0)?;
        Ok(Linear::new(w, Some(b)))
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Result<(Tensor, Tensor)> {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let w = self.uniform(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], bound)?;
        let b = self.constant(&format!("{name}.bias"), &[out_ch], 0.0)?;
        Ok((w, b))
    }

    /// SHA-256 over every parameter's name and f32 bytes, in name order.
    pub fn checksum(&self) -> Result<String> {
        let pairs: Vec<(String, Tensor)> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        tensors_checksum(&pairs)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every registered parameter with the archived value of the same name.
    pub fn load_from(&mut self, path: &Path, prefix: &str) -> Result<()> {
        let arch = archive::read(path, &self.device)?;
        for (name, var) in self.vars.iter() {
            let key = format!("{prefix}{name}");
            let t = arch
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Format(format!("missing tensor `{key}` in {}", path.display())))?;
            if t.dims() != var.dims() {
                return Err(Error::Format(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

pub fn tensors_checksum(pairs: &[(String, Tensor)]) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in pairs {
        hasher.update(name.as_bytes());
        let values = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        for v in values {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(format!("{:x}", hasher.finalize()))
}
