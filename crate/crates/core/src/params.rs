//! Named, trainable parameters and their accumulated gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::tape::Gradients;
use crate::tensor::Tensor;
use crate::{math, rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Xavier-uniform over a `[fan_in, fan_out]` matrix.
    Xavier,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Parameters in registration order, addressable by id or by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::InvalidConfig(format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name: name.into(), value, grad });
        self.by_name.insert(name.into(), id);
        Ok(id)
    }

    /// Registers a parameter initialized from its own seeded stream, so the
    /// values never depend on which other parameters exist.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init, seed: u64) -> Result<ParamId> {
        let value = init_tensor(name, shape, init, seed);
        self.insert(name, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the parameter gradients of one backward pass to the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            for (acc, x) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
                *acc += x;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        let sq: f64 = self.params.iter().flat_map(|p| p.grad.data().iter()).map(|g| g * g).sum();
        math::sqrt(sq)
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Replaces a parameter's value with a fresh initialization.
    pub fn reinit(&mut self, id: ParamId, init: Init, seed: u64) {
        let p = &mut self.params[id.0];
        p.value = init_tensor(&p.name, p.value.shape(), init, seed);
    }
}

pub(crate) fn init_tensor(name: &str, shape: &[usize], init: Init, seed: u64) -> Tensor {
    match init {
        Init::Zeros => Tensor::zeros(shape),
        Init::Ones => Tensor::filled(shape, 1.0),
        Init::Xavier => {
            let fan_in = shape.first().copied().unwrap_or(1);
            let fan_out = shape.get(1).copied().unwrap_or(1);
            let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            let mut r = rng::stream(seed, &[rng::label(name)]);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.random_range(-bound..bound)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape product")
        }
    }
}
