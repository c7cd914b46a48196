//! Named parameter storage and graph binding.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Insertion-ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<Entry<F>>,
    index: HashMap<String, usize>,
}

impl<F> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>, decay: bool) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry { name, tensor, decay });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    pub fn tensor(&self, name: &str) -> &Tensor<F> {
        self.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn entries(&self) -> &[Entry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Entry<F>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| Entry {
                    name: e.name.clone(),
                    tensor: e.tensor.cast(),
                    decay: e.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Inserts every tensor as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        let order: Vec<Var> = self.entries.iter().map(|e| g.param(e.tensor.clone())).collect();
        Bound {
            vars: self.entries.iter().map(|e| e.name.clone()).zip(order.iter().copied()).collect(),
            order,
        }
    }
}

/// Parameter name → graph leaf.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Leaves in store order.
    pub fn ordered(&self) -> &[Var] {
        &self.order
    }
}

/// Normal with std `std`, resampled outside ±2 std.
pub fn trunc_normal<F: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break F::of(z * std);
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Normal with std `1/sqrt(fan_in)`, variance-preserving for linear chains.
pub fn fan_in_normal<F: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let std = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(
        shape,
        (0..n).map(|_| F::of(rng.sample::<f64, _>(StandardNormal) * std)).collect(),
    )
}
