//! Dense row-major tensors.
//!
//! Images and feature maps use `[batch, channel, height, width]` order. A
//! scalar has the empty shape `[]` and holds exactly one value.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Floating-point element type. Expressions are monomorphic in it, so f32 and
/// f64 values can never mix inside one computation.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite float conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<_> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("head", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Vec::new(), vec![value])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Self::from_parts(shape.to_vec(), (0..numel(shape)).map(&mut f).collect())
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(
                op,
                format!("expected a rank-4 [N,C,H,W] tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        Ok(Self::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.len()).unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        )
    }

    /// Sample `index` of a batched tensor, keeping a leading extent of 1.
    pub fn sample(&self, index: usize) -> Tensor<T> {
        let per = self.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::from_parts(shape, self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Sample `index` of a batched tensor with the batch axis removed.
    pub fn unstack(&self, index: usize) -> Tensor<T> {
        let per = self.len() / self.shape[0];
        Tensor::from_parts(self.shape[1..].to_vec(), self.data[index * per..(index + 1) * per].to_vec())
    }

    /// Stacks equally shaped tensors along a new (or existing unit) batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack", "no tensors to stack"))?;
        let inner: &[usize] = if first.shape.first() == Some(&1) && first.rank() == 4 {
            &first.shape[1..]
        } else {
            &first.shape
        };
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.len() != first.len() || t.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(inner);
        Ok(Tensor::from_parts(shape, data))
    }
}
