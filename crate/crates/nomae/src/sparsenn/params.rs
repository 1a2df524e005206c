//! Named parameter tensors and their gradients.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::sparsenn::scalar::Scalar;

/// A trainable tensor: convolution/linear weights are matrices, biases are
/// vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Param<T: Scalar> {
    Matrix(Array2<T>),
    Vector(Array1<T>),
}

impl<T: Scalar> Param<T> {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Param::Matrix(m) => vec![m.nrows(), m.ncols()],
            Param::Vector(v) => vec![v.len()],
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Param::Matrix(m) => m.len(),
            Param::Vector(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zeros_like(&self) -> Param<T> {
        match self {
            Param::Matrix(m) => Param::Matrix(Array2::zeros(m.raw_dim())),
            Param::Vector(v) => Param::Vector(Array1::zeros(v.raw_dim())),
        }
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &T> + '_> {
        match self {
            Param::Matrix(m) => Box::new(m.iter()),
            Param::Vector(v) => Box::new(v.iter()),
        }
    }

    pub fn iter_mut(&mut self) -> Box<dyn Iterator<Item = &mut T> + '_> {
        match self {
            Param::Matrix(m) => Box::new(m.iter_mut()),
            Param::Vector(v) => Box::new(v.iter_mut()),
        }
    }

    pub fn as_matrix(&self) -> Result<&Array2<T>> {
        match self {
            Param::Matrix(m) => Ok(m),
            Param::Vector(_) => Err(Error::Shape("expected matrix parameter".into())),
        }
    }

    pub fn as_vector(&self) -> Result<&Array1<T>> {
        match self {
            Param::Vector(v) => Ok(v),
            Param::Matrix(_) => Err(Error::Shape("expected vector parameter".into())),
        }
    }
}

/// Name-keyed parameter set. `BTreeMap` keeps iteration (and therefore
/// checkpoints and optimizer sweeps) in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param<T>) {
        self.entries.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))
    }

    pub fn matrix(&self, name: &str) -> Result<&Array2<T>> {
        self.get(name)?.as_matrix()
    }

    pub fn vector(&self, name: &str) -> Result<&Array1<T>> {
        self.get(name)?.as_vector()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<T>)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(Param::len).sum()
    }

    /// Uniform init in `±sqrt(6 / fan_in)`: for convolutions the fan-in is
    /// taps * in-channels. Draws are made in f64 so f32 and f64 stores built
    /// from the same seed describe the same network.
    pub fn init_matrix(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut impl Rng,
    ) {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let data: Vec<T> =
            (0..rows * cols).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
        self.insert(
            name,
            Param::Matrix(Array2::from_shape_vec((rows, cols), data).expect("shape")),
        );
    }

    pub fn init_zero_vector(&mut self, name: impl Into<String>, len: usize) {
        self.insert(name, Param::Vector(Array1::zeros(len)));
    }
}

/// Gradients, shape-aligned with a [`ParamStore`]. Created zero-filled so
/// parameters the loss never touches report exactly zero.
#[derive(Debug, Clone)]
pub struct GradStore<T: Scalar> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            entries: params.iter().map(|(name, p)| (name.clone(), p.zeros_like())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown gradient {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown gradient {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<T>)> {
        self.entries.iter()
    }

    pub fn add_matrix(&mut self, name: &str, delta: &Array2<T>) -> Result<()> {
        match self.get_mut(name)? {
            Param::Matrix(m) => {
                if m.raw_dim() != delta.raw_dim() {
                    return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
                }
                *m += delta;
                Ok(())
            }
            Param::Vector(_) => Err(Error::Shape(format!("{name} is a vector"))),
        }
    }

    pub fn add_vector(&mut self, name: &str, delta: &Array1<T>) -> Result<()> {
        match self.get_mut(name)? {
            Param::Vector(v) => {
                if v.len() != delta.len() {
                    return Err(Error::Shape(format!("gradient shape mismatch for {name}")));
                }
                *v += delta;
                Ok(())
            }
            Param::Matrix(_) => Err(Error::Shape(format!("{name} is a matrix"))),
        }
    }

    /// Scale every gradient, e.g. for batch averaging.
    pub fn scale(&mut self, factor: T) {
        for param in self.entries.values_mut() {
            for v in param.iter_mut() {
                *v *= factor;
            }
        }
    }

    /// Elementwise accumulate another gradient store.
    pub fn accumulate(&mut self, other: &GradStore<T>) -> Result<()> {
        for (name, theirs) in other.entries.iter() {
            let ours = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown gradient {name}")))?;
            match (ours, theirs) {
                (Param::Matrix(a), Param::Matrix(b)) => *a += b,
                (Param::Vector(a), Param::Vector(b)) => *a += b,
                _ => return Err(Error::Shape(format!("gradient kind mismatch for {name}"))),
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|p| p.iter().all(|v| v.is_finite()))
    }
}
