use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Seeded generator used for every random draw in the crate.
pub type SeedRng = SplitMix64;

pub fn seeded(seed: u64) -> SeedRng {
    SplitMix64::seed_from_u64(seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.tensors[id.0] = value;
            return id;
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        id
    }

    /// Glorot-uniform matrix `[fan_in, fan_out]`.
    pub fn init_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut SeedRng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, Tensor::new([fan_in, fan_out], data).expect("positive extents"))
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape.to_vec()))
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::full(shape.to_vec(), 1.0))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("parameter `{name}` missing")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|id| &self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids whose names start with any of `prefixes`.
    pub fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| prefixes.iter().any(|p| self.names[id.0].starts_with(p)))
            .collect()
    }

    /// Parameters sorted by name.
    pub fn sorted(&self) -> BTreeMap<&str, &Tensor> {
        self.names.iter().map(String::as_str).zip(&self.tensors).collect()
    }
}

/// A graph plus the mapping from parameters to the leaves that hold them.
///
/// Parameters outside `trainable` enter the graph as constants, so no
/// gradient can reach them.
pub struct Ctx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    trainable: Option<&'a HashSet<ParamId>>,
    bound: HashMap<ParamId, Var>,
}

impl<'a> Ctx<'a> {
    /// Every parameter trainable.
    pub fn new(store: &'a ParamStore) -> Self {
        Self { g: Graph::new(), store, trainable: None, bound: HashMap::new() }
    }

    pub fn with_trainable(store: &'a ParamStore, trainable: &'a HashSet<ParamId>) -> Self {
        Self { g: Graph::new(), store, trainable: Some(trainable), bound: HashMap::new() }
    }

    /// Nothing trainable; used for inference.
    pub fn frozen(store: &'a ParamStore) -> Self {
        static EMPTY: std::sync::OnceLock<HashSet<ParamId>> = std::sync::OnceLock::new();
        Self::with_trainable(store, EMPTY.get_or_init(HashSet::new))
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let train = self.trainable.is_none_or(|t| t.contains(&id));
        let v = self.g.leaf(self.store.get(id).clone(), train);
        self.bound.insert(id, v);
        v
    }

    /// Gradients of all bound parameters that received one, ordered by id.
    pub fn param_grads(&mut self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .bound
            .iter()
            .filter_map(|(&id, &v)| self.g.grad(v).map(|t| (id, t.clone())))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}
