//! Named trainable parameters.

use std::sync::{Arc, RwLock};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::nn::rng::Rng;
use crate::nn::tensor::Tensor;

struct ParamInner {
    name: String,
    shape: Vec<usize>,
    value: RwLock<Tensor>,
}

/// A shared handle to a trainable tensor.
///
/// The current value is an immutable gradient-collecting leaf; updating the
/// parameter swaps in a new leaf, which also clears its gradient.
#[derive(Clone)]
pub struct Parameter(Arc<ParamInner>);

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Parameter({} {:?})", self.0.name, self.0.shape)
    }
}

impl Parameter {
    pub fn new(name: impl Into<String>, data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let leaf = Tensor::leaf(data, shape)?;
        Ok(Parameter(Arc::new(ParamInner {
            name: name.into(),
            shape: shape.to_vec(),
            value: RwLock::new(leaf),
        })))
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    /// The current leaf, for use in a forward pass.
    pub fn tensor(&self) -> Tensor {
        self.0.value.read().expect("param lock").clone()
    }

    pub fn values(&self) -> Vec<f64> {
        self.tensor().to_vec()
    }

    pub fn set_values(&self, data: Vec<f64>) -> Result<()> {
        let leaf = Tensor::leaf(data, &self.0.shape)?;
        *self.0.value.write().expect("param lock") = leaf;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tensor().grad()
    }

    pub fn zero_grad(&self) {
        self.tensor().zero_grad();
    }
}

/// Insertion-ordered registry of uniquely named parameters.
#[derive(Default, Clone, Debug)]
pub struct ParamStore {
    params: IndexMap<String, Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, p: Parameter) -> Result<Parameter> {
        if self.params.contains_key(p.name()) {
            return Err(Error::Contract(format!("duplicate parameter name {}", p.name())));
        }
        self.params.insert(p.name().to_string(), p.clone());
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn to_vec(&self) -> Vec<Parameter> {
        self.params.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.iter().for_each(Parameter::zero_grad);
    }

    /// Merges another store; names must not collide.
    pub fn extend(&mut self, other: &ParamStore) -> Result<()> {
        for p in other.iter() {
            self.insert(p.clone())?;
        }
        Ok(())
    }
}

/// Scoped parameter factory used while building a model.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child factory whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = self.path(name);
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn with_values(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Parameter> {
        let p = Parameter::new(self.path(name), data, shape)?;
        self.store.insert(p)
    }

    /// Gaussian entries with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Parameter> {
        let n = shape.iter().product();
        let data = self.rng.normals(n).into_iter().map(|v| v * std).collect();
        self.with_values(name, data, shape)
    }

    /// `fan_in × fan_out` weight scaled by `1/sqrt(fan_in)`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Parameter> {
        self.normal(name, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Parameter> {
        let n = shape.iter().product();
        self.with_values(name, vec![value; n], shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let mut init = Init::new(&mut store, &mut rng);
        init.scope("a").constant("w", &[2], 0.0).unwrap();
        assert!(init.scope("a").constant("w", &[2], 0.0).is_err());
        init.scope("b").constant("w", &[2], 0.0).unwrap();
        let names: Vec<_> = store.iter().map(|p| p.name().to_string()).collect();
        assert_eq!(names, ["a.w", "b.w"]);
    }

    #[test]
    fn set_values_clears_grad() {
        let p = Parameter::new("p", vec![1.0, 2.0], &[2]).unwrap();
        crate::nn::ops::sum(&p.tensor()).backward().unwrap();
        assert!(p.grad().is_some());
        p.set_values(vec![0.0, 0.0]).unwrap();
        assert!(p.grad().is_none());
        assert!(p.set_values(vec![0.0]).is_err());
    }
}
