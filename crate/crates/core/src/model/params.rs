//! Named parameter arrays.

use super::{ModelError, Result};
use crate::tensor::{Mat, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// How a parameter array is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Normal with standard deviation `1 / sqrt(fan_in)`.
    Scaled { fan_in: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            init,
        }
    }
}

/// Ordered collection of named parameter arrays. Order is the order of
/// insertion and is part of the checkpoint format.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every array in `specs` from one seeded stream, in order.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            let value = match spec.init {
                Init::Zeros => Mat::zeros((spec.rows, spec.cols)),
                Init::Scaled { fan_in } => {
                    let normal = Normal::new(0.0, 1.0 / (fan_in.max(1) as f64).sqrt())
                        .expect("finite standard deviation");
                    Mat::from_shape_simple_fn((spec.rows, spec.cols), || normal.sample(&mut rng))
                }
            };
            store.push(spec.name.clone(), value);
        }
        store
    }

    /// Appends an array. Panics on a duplicate name.
    pub fn push(&mut self, name: impl Into<String>, value: Mat) {
        let name = name.into();
        assert!(self.index(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
    }

    pub fn extend(&mut self, other: ParamStore) {
        for (name, value) in other.names.into_iter().zip(other.values) {
            self.push(name, value);
        }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index(name).map(|i| &mut self.values[i])
    }

    /// Looks up `name` and returns its handle on `tape`, which must have been
    /// built over [`ParamStore::values`].
    pub fn var(&self, tape: &Tape<'_>, name: &str) -> Result<Var> {
        self.index(name)
            .map(|i| tape.param(i))
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    /// The subset whose names start with `prefix`, in order.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, value) in self.iter() {
            if name.starts_with(prefix) {
                out.push(name, value.clone());
            }
        }
        out
    }
}
