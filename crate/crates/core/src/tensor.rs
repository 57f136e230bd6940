use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch shape in NCHW order. Dense activations use `h = w = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Elements in one sample.
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Per-sample shape `(c, h, w)`.
    pub fn item(&self) -> ItemShape {
        ItemShape::new(self.c, self.h, self.w)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Shape of a single sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ItemShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ItemShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        ItemShape { c, h, w }
    }

    pub const fn flat(len: usize) -> Self {
        ItemShape { c: len, h: 1, w: 1 }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn batch(&self, n: usize) -> Shape {
        Shape::new(n, self.c, self.h, self.w)
    }
}

impl fmt::Display for ItemShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::shape("tensor data", shape.len(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    /// Stacks equally shaped samples into one batch.
    pub fn stack(item: ItemShape, samples: &[&[T]]) -> Result<Self> {
        let mut data = Vec::with_capacity(item.len() * samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.len() != item.len() {
                return Err(Error::shape(format!("sample {i}"), item, s.len()));
            }
            data.extend_from_slice(s);
        }
        Ok(Tensor {
            shape: item.batch(samples.len()),
            data,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let len = self.shape.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Same data, new per-sample shape with equal element count.
    pub fn reshaped(mut self, item: ItemShape) -> Result<Self> {
        if item.len() != self.shape.sample_len() {
            return Err(Error::shape("reshape", self.shape.item(), item));
        }
        self.shape = item.batch(self.shape.n);
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}
