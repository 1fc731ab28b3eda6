//! Reverse-mode automatic differentiation over small dense `f64` arrays.
//!
//! A [`Graph`] is built fresh for every forward pass. Each call records one
//! node holding its forward value, the primitive that produced it and its
//! parents; [`Graph::backward`] walks the nodes in reverse creation order
//! (which is a topological order) and accumulates gradients into leaves.

mod adam;
mod check;
mod graph;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use check::{
    analytic_gradients, compare_with_finite_differences, finite_diff_check, FiniteDiffReport,
};
pub use graph::{Graph, Primitive, Var};

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

/// Row-major extents of a dense array. Rank 1 to 4, every extent positive.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK || dims.contains(&0) {
            return Err(Error::Shape { op: "shape", dims: vec![dims.to_vec()] });
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(outer, extent, inner)` such that flat index = `(o * extent + i) * inner + r`.
    pub(crate) fn split(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.0[..axis].iter().product();
        let inner = self.0[axis + 1..].iter().product();
        (outer, self.0[axis], inner)
    }

    pub(crate) fn with_axis(&self, axis: usize, extent: usize) -> Shape {
        let mut d = self.0.clone();
        d[axis] = extent;
        Shape(d)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Shape::new(&v)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

/// A dense array with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.len() != data.len() {
            return Err(Error::Shape { op: "tensor", dims: vec![dims.to_vec(), vec![data.len()]] });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_shape(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                dims: vec![shape.dims().to_vec(), vec![data.len()]],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let n = shape.len();
        Ok(Tensor { shape, data: vec![0.0; n] })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![v] }
    }

    /// A `[1, n]` row vector.
    pub fn row(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Tensor { shape: Shape(vec![1, n]), data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}
