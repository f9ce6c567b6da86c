use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};

use super::{NnError, Result};
use crate::rng;

/// Initial value of a parameter.
#[derive(Debug, Clone)]
pub enum Init {
    /// He-normal with the given fan-in.
    KaimingNormal { fan_in: usize },
    Const(f64),
    Tensor(Tensor),
}

/// Owns every trainable parameter and non-trainable buffer of a model, keyed
/// by dotted names. Layers keep clones of the `Var`s, which share storage
/// with the store.
#[derive(Debug)]
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    params: Vec<(String, Var)>,
    buffers: Vec<(String, Var)>,
    index: HashMap<String, (bool, usize)>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            seed,
            dtype,
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn materialize(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let t = match init {
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("positive std");
                let mut r = rng::rng(rng::derive_seed_str(self.seed, name), 0);
                let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut r)).collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            Init::Const(c) => Tensor::full(c, shape, &Device::Cpu)?,
            Init::Tensor(t) => {
                if t.dims() != shape {
                    return Err(NnError::Shape(format!("{name}: init {:?} vs {shape:?}", t.dims())));
                }
                t
            }
        };
        Ok(t.to_dtype(self.dtype)?)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.index.contains_key(name) {
            return Err(NnError::Duplicate(name.to_string()));
        }
        let v = Var::from_tensor(&self.materialize(name, shape, init)?)?;
        self.index.insert(name.to_string(), (true, self.params.len()));
        self.params.push((name.to_string(), v.clone()));
        Ok(v)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        if self.index.contains_key(name) {
            return Err(NnError::Duplicate(name.to_string()));
        }
        let v = Var::from_tensor(&self.materialize(name, shape, Init::Const(value))?)?;
        self.index.insert(name.to_string(), (false, self.buffers.len()));
        self.buffers.push((name.to_string(), v.clone()));
        Ok(v)
    }

    /// Trainable parameters in registration order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Var)] {
        &self.buffers
    }

    /// Parameter or buffer by name.
    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&(is_param, i)| {
            if is_param {
                &self.params[i].1
            } else {
                &self.buffers[i].1
            }
        })
    }

    /// Overwrites a parameter or buffer in place, keeping its dtype.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let v = self.get(name).ok_or_else(|| NnError::Missing(name.to_string()))?;
        if v.dims() != value.dims() {
            return Err(NnError::Shape(format!("{name}: {:?} vs {:?}", v.dims(), value.dims())));
        }
        v.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Parameters whose names start with any of `prefixes`.
    pub fn params_with_prefix<'a>(&'a self, prefixes: &'a [&str]) -> impl Iterator<Item = &'a (String, Var)> + 'a {
        self.params
            .iter()
            .filter(move |(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }
}
