//! Named trainable parameters and their gradients.
//!
//! A [`ParamStore`] owns the model's weights outside of any graph. Each
//! forward pass binds the store into a fresh [`Graph`] as leaf tensors;
//! after `backward`, leaf gradients are pulled back out into a
//! [`GradStore`] keyed by the same names. Parameter values only ever
//! change through the optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::Result;
use crate::rng::derive_rng;
use crate::tensor::{Graph, TensorId};

/// How a parameter tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Zeros,
}

/// Name, shape and initialization of one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn uniform(name: impl Into<String>, shape: Vec<usize>) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init: Init::Uniform(0.1),
        }
    }

    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init: Init::Zeros,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Named collection of all trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    /// Initialize parameters from specs. Each tensor gets its own RNG
    /// stream derived from `(seed, name)`, so the set of other parameters
    /// never influences its initial values.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Self {
        let mut entries = BTreeMap::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let values = match spec.init {
                Init::Zeros => vec![0.0; n],
                Init::Uniform(bound) => {
                    let mut rng = derive_rng(seed, &format!("init/{}", spec.name));
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
            };
            entries.insert(
                spec.name.clone(),
                Param {
                    shape: spec.shape.clone(),
                    values,
                },
            );
        }
        ParamStore { entries }
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names in deterministic (sorted) order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }

    /// Insert every parameter into `graph` as a leaf and record the ids.
    pub fn bind(&self, graph: &mut Graph) -> Result<BoundParams> {
        let mut ids = BTreeMap::new();
        for (name, param) in &self.entries {
            let id = graph.leaf(param.values.clone(), param.shape.clone())?;
            ids.insert(name.clone(), id);
        }
        Ok(BoundParams { ids })
    }
}

/// Graph leaf ids for every parameter of one forward pass.
#[derive(Debug)]
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    /// Pull leaf gradients out of the graph, adding them into `grads`.
    pub fn accumulate_grads(&self, graph: &Graph, grads: &mut GradStore) {
        for (name, &id) in &self.ids {
            if let Some(g) = graph.grad(id) {
                grads.add(name, g);
            }
        }
    }
}

/// Accumulated gradients, one buffer per parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    entries: BTreeMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        GradStore::default()
    }

    pub fn add(&mut self, name: &str, values: &[f64]) {
        match self.entries.get_mut(name) {
            Some(buf) => {
                debug_assert_eq!(buf.len(), values.len());
                for (b, v) in buf.iter_mut().zip(values) {
                    *b += v;
                }
            }
            None => {
                self.entries.insert(name.to_string(), values.to_vec());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|v| v.as_slice())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Reset all buffers to zero, keeping allocations.
    pub fn zero(&mut self) {
        for buf in self.entries.values_mut() {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for buf in self.entries.values_mut() {
            buf.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|buf| buf.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale all gradients down so the global norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }

    /// First parameter containing a non-finite value, if any.
    pub fn find_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, buf)| buf.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name.as_str())
    }
}
