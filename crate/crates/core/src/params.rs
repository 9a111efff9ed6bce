//! Named parameter storage and matching gradient buffers.

use std::collections::HashMap;

use rand::Rng;

use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Insertion-ordered set of named tensors. The order is stable and is the
/// order used by checkpoints.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Uniform fan-in init: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            values: self
                .values
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }
}

/// One gradient matrix per parameter, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    values: Vec<Matrix>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        self.values[id.0].add_assign(g);
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|m| m.scale_assign(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|m| m.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.values.iter().enumerate().map(|(i, m)| (ParamId(i), m))
    }
}
