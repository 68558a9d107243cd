use std::collections::HashMap;

use rand::Rng;

use super::{Array, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named collection of learnable arrays, kept in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    /// Uniform(-bound, bound) initialised matrix.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let arr = Array::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-bound..bound)));
        self.insert(name, arr)
    }

    /// Glorot-uniform initialised weight matrix.
    pub fn insert_glorot(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.insert_uniform(name, rows, cols, bound, rng)
    }

    pub fn insert_full(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: T,
    ) -> Result<ParamId> {
        self.insert(name, Array::full(rows, cols, value))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Array<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array<T>> {
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array::len).sum()
    }

    /// Replaces the array stored under `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Array<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let slot = &mut self.values[id.0];
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param set",
                left: slot.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }
}

/// Gradient per parameter; parameters the loss never touched read as zero.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub(crate) fn new(grads: Vec<Option<Array<T>>>, shapes: Vec<(usize, usize)>) -> Self {
        Self { grads, shapes }
    }

    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        let shapes = params.values.iter().map(|a| (a.rows(), a.cols())).collect();
        Self {
            grads: vec![None; params.len()],
            shapes,
        }
    }

    pub fn get(&self, id: ParamId) -> Array<T> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Array::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, id: ParamId) -> Option<&Array<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn is_reached(&self, id: ParamId) -> bool {
        self.grads[id.0].is_some()
    }

    /// Adds `other * scale` into this accumulator.
    pub fn accumulate(&mut self, other: &Gradients<T>, scale: T) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(g) = theirs {
                let scaled = g.map(|x| x * scale);
                match mine {
                    Some(m) => m.add_assign(&scaled),
                    None => *mine = Some(scaled),
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
