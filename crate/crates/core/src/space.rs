//! Search-space geometry: named, bounded merge-weight dimensions.
//!
//! A [`SearchSpace`] names one weight per ingredient model. When an
//! instruction-tuned ingredient participates, its dimension is named
//! [`IT_DIM`] and sits first; the remaining dimensions are the
//! continually-pretrained ingredients in a fixed order. A [`WeightVector`] is
//! a point in that space, aligned index-for-index with the dimensions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved dimension name for the instruction-tuned ingredient's weight.
pub const IT_DIM: &str = "it";

/// Errors raised by space construction and point validation.
#[derive(Debug, Error)]
pub enum SpaceError {
    #[error("search space has no dimensions")]
    Empty,
    #[error("dimension {name:?}: low {low} must be strictly below high {high}")]
    BadBounds { name: String, low: f64, high: f64 },
    #[error("dimension name {0:?} appears more than once")]
    DuplicateDim(String),
    #[error("dimension {IT_DIM:?} must come first (found at index {0})")]
    ItNotFirst(usize),
    #[error("point has {got} coordinates, space has {expected} dimensions")]
    ArityMismatch { expected: usize, got: usize },
}

/// One bounded weight dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dim {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

impl Dim {
    pub fn new(name: impl Into<String>, low: f64, high: f64) -> Self {
        Self {
            name: name.into(),
            low,
            high,
        }
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.low && x <= self.high
    }
}

/// An ordered set of uniquely named dimensions, IT first when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Dim>", into = "Vec<Dim>")]
pub struct SearchSpace {
    dims: Vec<Dim>,
}

impl SearchSpace {
    /// Build a space, enforcing finite non-degenerate bounds, unique names,
    /// and the IT-first ordering rule.
    pub fn new(dims: Vec<Dim>) -> Result<Self, SpaceError> {
        if dims.is_empty() {
            return Err(SpaceError::Empty);
        }
        for (i, dim) in dims.iter().enumerate() {
            if !(dim.low.is_finite() && dim.high.is_finite() && dim.low < dim.high) {
                return Err(SpaceError::BadBounds {
                    name: dim.name.clone(),
                    low: dim.low,
                    high: dim.high,
                });
            }
            if dims[..i].iter().any(|d| d.name == dim.name) {
                return Err(SpaceError::DuplicateDim(dim.name.clone()));
            }
            if dim.name == IT_DIM && i != 0 {
                return Err(SpaceError::ItNotFirst(i));
            }
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[Dim] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.dims.iter().map(|d| d.name.as_str())
    }

    /// Whether the first dimension is the instruction-tuned weight.
    pub fn has_it_dim(&self) -> bool {
        self.dims.first().is_some_and(|d| d.name == IT_DIM)
    }

    /// Check that a point has the right arity and sits within bounds.
    pub fn contains(&self, point: &WeightVector) -> bool {
        point.values.len() == self.dims.len()
            && point
                .values
                .iter()
                .zip(&self.dims)
                .all(|(&x, d)| x.is_finite() && d.contains(x))
    }

    /// Error unless `point` has one coordinate per dimension.
    pub fn check_arity(&self, point: &WeightVector) -> Result<(), SpaceError> {
        if point.values.len() != self.dims.len() {
            return Err(SpaceError::ArityMismatch {
                expected: self.dims.len(),
                got: point.values.len(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<Dim>> for SearchSpace {
    type Error = SpaceError;
    fn try_from(dims: Vec<Dim>) -> Result<Self, Self::Error> {
        SearchSpace::new(dims)
    }
}

impl From<SearchSpace> for Vec<Dim> {
    fn from(space: SearchSpace) -> Self {
        space.dims
    }
}

/// A point in a [`SearchSpace`]: one weight per dimension, same order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector {
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl From<Vec<f64>> for WeightVector {
    fn from(values: Vec<f64>) -> Self {
        Self { values }
    }
}
