use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub tensor: Tensor,
    pub frozen: bool,
    pub grad: Tensor,
}

/// How a freshly registered tensor is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// uniform(-r, r), r = 1/sqrt(fan_in) with fan_in the last dimension.
    Uniform,
    /// Gaussian with the given standard deviation (embedding tables).
    Normal(f64),
    Zeros,
}

/// Named parameter tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let mut tensor = Tensor::zeros(shape);
        match init {
            Init::Uniform => {
                let fan_in = *shape.last().unwrap_or(&1);
                let r = 1.0 / (fan_in.max(1) as f64).sqrt();
                for v in tensor.data_mut() {
                    *v = rng.gen_range(-r..r);
                }
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Invalid(e.to_string()))?;
                for v in tensor.data_mut() {
                    *v = d.sample(rng);
                }
            }
            Init::Zeros => {}
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(ParamTensor { name, grad: Tensor::zeros(shape), tensor, frozen: false });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamTensor {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Clears every gradient, then writes the supplied ones.
    pub fn assign_grads(&mut self, grads: Gradients) -> Result<()> {
        if grads.per_param.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient set for {} params applied to store of {}",
                grads.per_param.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads.per_param) {
            p.grad = g;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }
}

/// One gradient tensor per parameter of a store, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub per_param: Vec<Tensor>,
    /// Tape node indices in the order backward visited them.
    pub visited: Vec<usize>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            per_param: store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect(),
            visited: Vec::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.per_param[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.per_param[id.0]
    }

    /// Adds `other` into `self`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.per_param {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.per_param
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
