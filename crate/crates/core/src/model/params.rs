//! Named trainable tensors with seed-deterministic initialization.

use std::collections::BTreeMap;

use candle::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    /// He-normal with the given fan-in.
    Kaiming(usize),
    /// Normal with variance `1 / fan_in`.
    LeCun(usize),
}

fn normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: Option<ChaCha8Rng>,
    vars: BTreeMap<String, Var>,
    /// Creation order, which is also the order random values were drawn in.
    order: Vec<String>,
}

impl ParamStore {
    /// Parameters initialized from a seeded generator.
    pub fn seeded(seed: u64, dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
            vars: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    /// Every parameter starts at zero regardless of its init rule. Used when
    /// weights are about to be loaded or only shapes matter.
    pub fn zeroed(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: None,
            vars: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match (&mut self.rng, init) {
            (None, _) | (_, Init::Zeros) => vec![0.0; n],
            (Some(_), Init::Const(v)) => vec![v; n],
            (Some(rng), Init::TruncNormal(std)) => trunc_normal(rng, std, n),
            (Some(rng), Init::Kaiming(fan_in)) => normal(rng, (2.0 / fan_in.max(1) as f64).sqrt(), n),
            (Some(rng), Init::LeCun(fan_in)) => normal(rng, (1.0 / fan_in.max(1) as f64).sqrt(), n),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        self.order.push(name.to_string());
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Parameters sorted by name.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrite a parameter in place; every layer holding it sees the change.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::ParamMismatch(format!("no parameter named `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::ParamMismatch(format!(
                "`{name}`: expected shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?.contiguous()?)?;
        Ok(())
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|_| loop {
            let z: f64 = normal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect()
}
