//! Named, insertion-ordered parameter storage.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is filled by [`ParamRegistry::init_params`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal truncated at two standard deviations.
    TruncNormal {
        std: f64,
    },
    Normal {
        std: f64,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub init: Init,
}

#[derive(Clone, Debug, Default)]
pub struct ParamRegistry<T> {
    params: IndexMap<String, Param<T>>,
}

/// Tape leaves for every registry entry, in registry order.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Real> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let value = match init {
            Init::Ones => Tensor::ones(shape.to_vec()),
            _ => Tensor::zeros(shape.to_vec()),
        };
        let (idx, _) = self.params.insert_full(
            name,
            Param {
                value,
                grad: None,
                init,
            },
        );
        Ok(ParamId(idx))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).expect("param id").0
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::dim("set_param", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Seeded initialization in registry order.
    pub fn init_params(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.values_mut() {
            let data = p.value.data_mut();
            match p.init {
                Init::TruncNormal { std } => data.iter_mut().for_each(|x| *x = T::lit(trunc_normal(&mut rng, std))),
                Init::Normal { std } => data.iter_mut().for_each(|x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *x = T::lit(z * std)
                }),
                Init::Zeros => data.iter_mut().for_each(|x| *x = T::zero()),
                Init::Ones => data.iter_mut().for_each(|x| *x = T::one()),
            }
            p.grad = None;
        }
    }

    /// Puts every parameter on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.params.values().map(|p| tape.param(p.value.clone())).collect())
    }

    /// Adds the gradients of a backward pass into the stored grads. Leaves
    /// the backward pass never reached receive zeros.
    pub fn accumulate_grads(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (p, &var) in self.params.values_mut().zip(&bound.0) {
            let stored = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
            if let Some(g) = grads.slice(var) {
                stored.data_mut().iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    /// Sorted names; the on-disk order.
    pub fn sorted_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.params.keys().cloned().collect();
        names.sort();
        names
    }
}
