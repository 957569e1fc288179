use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{NnError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight initialisation schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// He normal with the given fan (`std = gain / sqrt(fan)`), gain √2 for ReLU.
    HeNormal {
        fan: usize,
    },
    Normal {
        mean: f64,
        std: f64,
    },
    /// `U(-1/sqrt(fan), 1/sqrt(fan))`, the usual default for linear layers.
    FanUniform {
        fan: usize,
    },
}

impl Init {
    pub fn sample<T: Scalar, R: Rng + ?Sized>(self, shape: &[usize], rng: &mut R) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match self {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::Constant(c) => vec![T::from_f64_lossy(c); n],
            Init::HeNormal { fan } => {
                let std = (2.0 / fan.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
            }
            Init::Normal { mean, std } => {
                let dist = Normal::new(mean, std).expect("valid std");
                (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
            }
            Init::FanUniform { fan } => {
                let bound = 1.0 / (fan.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
            }
        };
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Tensor<T>,
}

/// Owns every trainable parameter and non-trainable buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Entry<T>>,
    buffers: Vec<Entry<T>>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new(), index: HashMap::new(), buffer_index: HashMap::new() }
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Entry { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        if self.buffer_index.contains_key(&name) {
            return Err(NnError::DuplicateName(name));
        }
        self.buffer_index.insert(name.clone(), self.buffers.len());
        self.buffers.push(Entry { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param_name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Parameter ids whose names start with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params.iter().enumerate().filter(|(_, e)| e.name.starts_with(prefix)).map(|(i, _)| ParamId(i)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total number of trainable scalars.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|e| e.value.numel()).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|e| e.name.starts_with(prefix)).map(|e| e.value.numel()).sum()
    }

    /// All named tensors (parameters first, then buffers prefixed `buffer:`),
    /// in insertion order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.params
            .iter()
            .map(|e| (e.name.clone(), &e.value))
            .chain(self.buffers.iter().map(|e| (format!("buffer:{}", e.name), &e.value)))
            .collect()
    }

    /// Overwrites values from a name → tensor map; every stored entry must be present.
    pub fn load_named(&mut self, named: &HashMap<String, Tensor<T>>) -> Result<()> {
        for e in self.params.iter_mut() {
            let t = named.get(&e.name).ok_or_else(|| NnError::UnknownName(e.name.clone()))?;
            if t.shape() != e.value.shape() {
                return Err(NnError::Shape(format!(
                    "`{}` stored as {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.value.shape()
                )));
            }
            e.value = t.clone();
        }
        for e in self.buffers.iter_mut() {
            let key = format!("buffer:{}", e.name);
            let t = named.get(&key).ok_or_else(|| NnError::UnknownName(key.clone()))?;
            if t.shape() != e.value.shape() {
                return Err(NnError::Shape(format!("`{key}` shape mismatch")));
            }
            e.value = t.clone();
        }
        Ok(())
    }
}
