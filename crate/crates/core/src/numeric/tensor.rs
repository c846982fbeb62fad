use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rank-1 or rank-2 shape. Scalars are `Vector(1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn scalar() -> Self {
        Shape::Vector(1)
    }

    pub fn numel(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Vector(n) => vec![n],
            Shape::Matrix(r, c) => vec![r, c],
        }
    }

    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        match *dims {
            [n] if n > 0 => Ok(Shape::Vector(n)),
            [r, c] if r > 0 && c > 0 => Ok(Shape::Matrix(r, c)),
            _ => Err(Error::Config(format!(
                "unsupported tensor shape {dims:?}: need one or two positive dimensions"
            ))),
        }
    }
}

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Shape, values: Vec<f64>) -> Result<Self> {
        if shape.numel() != values.len() {
            return Err(Error::dim("tensor", &shape.dims(), &[values.len()]));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            values: vec![0.0; shape.numel()],
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: Shape::Vector(values.len()),
            values,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::vector(vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(Shape::Matrix(rows, cols), values)
    }

    /// Builds a matrix from nested rows; handy in tests.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Config("ragged rows".into()));
        }
        let values = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::matrix(rows.len(), cols, values)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Enables gradient tracking, allocating a zeroed buffer if needed.
    pub fn track(&mut self) -> &mut [f64] {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Mutable values alongside the gradient buffer (empty if untracked).
    pub fn values_and_grad(&mut self) -> (&mut [f64], &[f64]) {
        (&mut self.values, self.grad.as_deref().unwrap_or(&[]))
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        match self.shape {
            Shape::Matrix(_, c) => &self.values[r * c..(r + 1) * c],
            Shape::Vector(_) => &self.values,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
