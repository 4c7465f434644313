//! Learnable parameter store keyed by block path strings.
//!
//! A `BTreeMap` keeps iteration order deterministic: leaf registration,
//! gradient collection, optimizer updates, and checkpoint bytes all walk the
//! same sorted order.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) {
        let path = path.into();
        let prev = self.params.insert(path.clone(), tensor);
        assert!(prev.is_none(), "duplicate parameter path {path}");
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Shape(format!("unknown parameter path {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::Shape(format!("unknown parameter path {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count across all tensors.
    pub fn total_elems(&self) -> usize {
        self.params.values().map(|t| t.elems()).sum()
    }

    /// L2 norm over every parameter, for diagnostics.
    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(|t| t.is_finite())
    }

    /// Zero a parameter in place (used for identity-start output layers).
    pub fn zero(&mut self, path: &str) -> Result<()> {
        let t = self.get_mut(path)?;
        for v in t.data_mut() {
            *v = 0.0;
        }
        Ok(())
    }
}

/// Parameter leaves registered into a graph for one forward/backward pass.
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    /// Create one differentiable leaf per parameter, in sorted path order.
    pub fn register(graph: &mut Graph, store: &ParamStore) -> Self {
        let mut nodes = BTreeMap::new();
        for (path, tensor) in store.iter() {
            nodes.insert(path.clone(), graph.leaf(tensor.clone()));
        }
        ParamNodes { nodes }
    }

    pub fn id(&self, path: &str) -> NodeId {
        *self
            .nodes
            .get(path)
            .unwrap_or_else(|| panic!("parameter {path} was not registered"))
    }

    /// Gradients after `backward`, keyed by path. Parameters the output does
    /// not depend on get zero gradients.
    pub fn collect_grads(&self, graph: &Graph, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut grads = BTreeMap::new();
        for (path, &id) in &self.nodes {
            let g = match graph.grad(id) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.get(path).expect("store has path").shape()),
            };
            grads.insert(path.clone(), g);
        }
        grads
    }
}

/// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn registration_and_grad_collection_cover_all_paths() {
        let mut store = ParamStore::new();
        store.insert("b.w", Tensor::filled(&[2], 2.0));
        store.insert("a.w", Tensor::filled(&[3], 1.0));

        let mut g = Graph::new();
        let nodes = ParamNodes::register(&mut g, &store);
        // Only b.w participates in the loss.
        let s = g.sum_all(nodes.id("b.w"));
        g.backward(s);
        let grads = nodes.collect_grads(&g, &store);
        assert_eq!(grads["b.w"].data(), &[1.0, 1.0]);
        assert_eq!(grads["a.w"].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = fan_in_uniform(&mut r1, &[4, 4], 16);
        let b = fan_in_uniform(&mut r2, &[4, 4], 16);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    #[should_panic]
    fn duplicate_path_panics() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::zeros(&[1]));
        store.insert("x", Tensor::zeros(&[1]));
    }
}
