#[allow(unused_imports)]
use num_traits::Float;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stable index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable tensors. Iteration order is
/// insertion order everywhere (optimizer state, serialization,
/// gradient collection), which is what makes runs reproducible.
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn by_name(&self, name: &str) -> Result<ParamId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(ParamId)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces a tensor wholesale, e.g. when loading a checkpoint.
    /// The shape must match what the model was built with.
    pub fn set(&mut self, id: ParamId, tensor: Tensor<T>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {}: stored {:?}, incoming {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Inserts every parameter into a graph, either as trainable
    /// leaves (gradients collected) or as constants (frozen).
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.trainable(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// The graph-side image of a [`ParamSet`] for one forward/backward
/// pass. Indexed by the same [`ParamId`]s as the owning set.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradients in parameter order after a backward pass; zero
    /// tensors where no gradient reached a parameter.
    pub fn grads<T: Scalar>(&self, graph: &Graph<T>, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, &v)| match graph.grad(v) {
                Some(g) => Tensor::from_vec(params.tensors[i].shape(), g.to_vec())
                    .expect("gradient shape matches parameter"),
                None => Tensor::zeros(params.tensors[i].shape()),
            })
            .collect()
    }
}

// ── initialization ──

/// Uniform(−bound, bound) with bound = 1/sqrt(fan_in); the usual
/// scaling that keeps activations O(1) at depth.
pub fn init_uniform_fanin<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistency")
}

/// Small-magnitude init for heads that should start near a constant
/// output: weights U(−scale, scale), bias fixed.
pub fn init_head<T: Scalar, R: Rng>(
    shape: &[usize],
    scale: f64,
    rng: &mut R,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.gen_range(-scale..scale)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/product consistency")
}
