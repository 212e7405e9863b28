use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations in a fixed order.
#[derive(Default, Debug)]
pub struct Declarations {
    specs: Vec<ParamSpec>,
}

impl Declarations {
    pub fn declare(&mut self, name: String, shape: &[usize], init: Init) {
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init });
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    /// Materialises every declaration; draws happen in declaration order.
    pub fn instantiate<T: Real>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for s in &self.specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(&s.shape),
                Init::Const(v) => Tensor::full(&s.shape, T::from_f64_lossy(v)),
                Init::Uniform(b) => Tensor::uniform(&s.shape, -b, b, &mut rng),
            };
            store.insert(s.name.clone(), t)?;
        }
        Ok(store)
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: String, value: Tensor<T>) -> Result<()> {
        if self.index.contains_key(&name) {
            return Err(Error::invalid("params", format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every tensor as a gradient-tracked leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundParams<'_, T> {
        let vars = self.entries.iter().map(|(_, t)| g.param(t.clone())).collect();
        BoundParams { store: self, vars }
    }

    /// Same as [`ParamStore::bind`] but without gradient tracking.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> BoundParams<'_, T> {
        let vars = self.entries.iter().map(|(_, t)| g.constant(t.clone())).collect();
        BoundParams { store: self, vars }
    }
}

/// Parameters registered in one graph.
pub struct BoundParams<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<T: Real> BoundParams<'_, T> {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in store order; parameters the loss never reached get zeros.
    pub fn grads(&self, g: &Graph<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| g.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect()
    }
}
