//! Named parameter storage and its binding into a [`Graph`].

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ndgrad::{grad_check, Array, GradError, Graph, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, array: Array) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.arrays.push(array.without_grad().requiring_grad());
        ParamId(self.names.len() - 1)
    }

    /// Uniform in `±scale / sqrt(fan_in)`.
    pub fn fan_in_uniform(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        scale: f64,
    ) -> ParamId {
        let bound = scale / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Array::new(shape, data).expect("positive extents"))
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Array::full(shape, value))
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.arrays[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.arrays[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.names.iter().map(String::as_str).zip(&self.arrays)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.arrays.iter().map(Array::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.arrays.iter_mut().for_each(Array::zero_grad);
    }
}

/// A graph plus the parameters bound into it. Each parameter becomes at most
/// one leaf, so parameters shared across pyramid levels collect one gradient.
pub struct Ctx<'p> {
    pub g: Graph,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'p> Ctx<'p> {
    /// Parameters become gradient-carrying leaves.
    pub fn training(params: &'p ParamStore) -> Self {
        Self::with_mode(params, true)
    }

    /// Parameters become constants; no activations are kept for backward.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self::with_mode(params, false)
    }

    fn with_mode(params: &'p ParamStore, trainable: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    /// Wraps an existing graph; see [`param_grad_check`].
    pub fn from_graph(params: &'p ParamStore, g: Graph, trainable: bool) -> Self {
        Self {
            g,
            params,
            bound: vec![None; params.len()],
            trainable,
        }
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    /// Uses `v` in place of parameter `id` for the rest of this context.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound[id.0] = Some(v);
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.trainable
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let array = self.params.get(id);
        let v = if self.trainable {
            self.g.leaf(array.clone())
        } else {
            self.g.constant(array.without_grad())
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound parameter after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, &[f64])> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                Some((ParamId(i), self.g.grad(v)?))
            })
            .collect()
    }
}

/// Finite-difference check of a scalar readout with respect to one parameter;
/// every other parameter is held constant.
pub fn param_grad_check<F>(store: &ParamStore, id: ParamId, step: f64, f: F) -> crate::error::Result<f64>
where
    F: Fn(&mut Ctx<'_>) -> crate::error::Result<Var>,
{
    let x = store.get(id).without_grad();
    let err = grad_check(
        |g, v| {
            let mut ctx = Ctx::from_graph(store, std::mem::take(g), false);
            ctx.bind(id, v);
            let out = f(&mut ctx);
            *g = ctx.into_graph();
            out.map_err(|e| GradError::InvalidArgument(e.to_string()))
        },
        &x,
        step,
    )?;
    Ok(err)
}
