//! Minimal dense-tensor library with reverse-mode automatic differentiation
//! and the Adam update rule. Everything upstream (text encoder, fusion,
//! hierarchy heads) is expressed as a [`Graph`] over these ops.
//!
//! Training and tests run in f64; 32-bit floats appear only in checkpoints.
//! A graph and its parameters are owned by one logical thread while training;
//! frozen parameter sets may be read from many threads.

mod adam;
mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

#[cfg(test)]
mod tests;

use indexmap::IndexMap;
use rand::Rng;

pub use adam::AdamState;
pub use graph::{Feeds, GradMap, Graph, NodeId, OpKind, Targets};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape {shape:?} does not match {len} data values")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at node {node}: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("duplicate leaf name {0}")]
    DuplicateLeaf(String),
    #[error("no feed supplied for placeholder {0}")]
    MissingFeed(String),
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("node {0} has no forward value; run forward first")]
    NotForwarded(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range {bound} at {node}")]
    IndexOutOfRange {
        index: usize,
        bound: usize,
        node: String,
    },
    #[error("non-finite value produced at node {node}")]
    NonFinite { node: String },
    #[error("non-finite gradient for parameter {0}")]
    NanGradient(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("dropout rate {0} outside [0, 1)")]
    BadDropoutRate(f64),
    #[error("grad_check requires eps in [1e-7, 1e-3], got {0}")]
    BadEps(f64),
    #[error("grad_check on a graph with stochastic dropout; disable training mode")]
    StochasticGradCheck,
}

/// Named persistent parameter tensors; the model state between steps.
/// Insertion order is stable, which fixes checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        let prev = self.map.insert(name.to_string(), t.with_grad());
        assert!(prev.is_none(), "parameter {} registered twice", name);
    }

    pub fn insert_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: &[usize],
        lo: f64,
        hi: f64,
    ) {
        self.insert(name, Tensor::uniform(rng, shape, lo, hi));
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::ones(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }
}
