//! Named parameter storage and binding of parameters onto a tape.

use std::collections::{BTreeMap, HashMap};

use mmdg_autodiff::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MmdgError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Parameters keyed by dotted name, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) {
        self.params.insert(name.into(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| MmdgError::Config(format!("unknown parameter {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.tensor)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| MmdgError::Config(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Registry of parameters the optimizer may update.
    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }
}

/// Lazily records store parameters as tape leaves: trainable ones as
/// differentiable variables, frozen ones as constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: HashMap<String, Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = if p.trainable {
            g.variable(p.tensor.clone())
        } else {
            g.constant(p.tensor.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn into_bound(self) -> HashMap<String, Var> {
        self.bound
    }
}

/// Glorot-uniform matrix `[fan_in, fan_out]`.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], a)
}

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], half_width: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| rng.gen_range(-half_width..=half_width))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}
