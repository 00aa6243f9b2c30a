use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GqnError, Result};

use super::{Scalar, Tensor};

/// How registered weights are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    GlorotUniform,
}

/// Named parameter tensors with gradient slots.
///
/// Names are unique and kept in registration order. The group of a parameter
/// is the part of its name before the first `.`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    seed: u64,
    scheme: InitScheme,
}

/// Parameter name to gradient.
pub type GradMap<T> = IndexMap<String, Tensor<T>>;

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: IndexMap::new(),
            seed,
            scheme: InitScheme::GlorotUniform,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scheme(&self) -> InitScheme {
        self.scheme
    }

    /// Registers an already-built tensor.
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(GqnError::InvalidInput(format!(
                "parameter `{name}` registered twice"
            )));
        }
        self.params.insert(name.to_string(), value);
        Ok(())
    }

    /// Registers a tensor drawn from the init scheme. Fans are the last two
    /// axes (`[fan_in, fan_out]`); a vector counts as `[1, n]`.
    ///
    /// Every parameter draws from its own ChaCha stream, indexed by
    /// registration order, so values depend only on the seed and the
    /// registration sequence.
    pub fn register_uniform(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        let (fan_in, fan_out) = match shape.as_slice() {
            [n] => (1, *n),
            [.., a, b] => (*a, *b),
            [] => return Err(GqnError::Shape("empty parameter shape".into())),
        };
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.params.len() as u64);
        let numel = shape.iter().product();
        let values = (0..numel)
            .map(|_| T::lit(rng.gen_range(-bound..=bound)))
            .collect();
        self.insert(name, Tensor::new(shape, values)?)
    }

    pub fn register_zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<()> {
        self.insert(name, Tensor::zeros(shape)?)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| GqnError::InvalidInput(format!("unknown parameter `{name}`")))
    }

    /// Replaces the values of an existing parameter; the shape must match.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| GqnError::InvalidInput(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(GqnError::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Distinct groups in registration order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for name in self.params.keys() {
            let g = group_of(name);
            if !out.iter().any(|x| x == g) {
                out.push(g.to_string());
            }
        }
        out
    }

    pub(crate) fn set_grad(&mut self, name: &str, grad: Vec<T>) -> Result<()> {
        self.params
            .get_mut(name)
            .ok_or_else(|| GqnError::InvalidInput(format!("unknown parameter `{name}`")))?
            .set_grad(grad)
    }

    /// One plain gradient-descent step using the stored gradients.
    pub fn sgd_step(&mut self, learning_rate: T) -> Result<()> {
        for (name, t) in self.params.iter_mut() {
            let grad = t
                .grad()
                .ok_or_else(|| GqnError::Contract(format!("parameter `{name}` has no gradient")))?;
            let values = t
                .values()
                .iter()
                .zip(grad)
                .map(|(&v, &g)| v - learning_rate * g)
                .collect();
            *t = Tensor::new(t.shape().to_vec(), values)?;
        }
        Ok(())
    }
}
