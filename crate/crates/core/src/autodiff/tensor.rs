use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor of up to four axes. An empty shape is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::Shape(format!("at most 4 axes supported, got {shape:?}")));
        }
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel(shape)],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Per-sequence validity for a right-padded batch of shape `(batch, max_len)`.
/// Sequence `b` is valid on positions `0..lens[b]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    lens: Vec<usize>,
    max_len: usize,
}

impl Mask {
    pub fn new(lens: Vec<usize>, max_len: usize) -> Result<Self> {
        if let Some(&bad) = lens.iter().find(|&&l| l > max_len) {
            return Err(Error::Shape(format!("length {bad} exceeds padded length {max_len}")));
        }
        Ok(Self { lens, max_len })
    }

    /// Mask with every sequence padded to the longest one.
    pub fn from_lens(lens: Vec<usize>) -> Self {
        let max_len = lens.iter().copied().max().unwrap_or(0);
        Self { lens, max_len }
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lens[b]
    }

    pub fn valid_count(&self) -> usize {
        self.lens.iter().sum()
    }

    /// Mask after a valid (unpadded) convolution with kernel `k`: a position
    /// stays valid only if its whole receptive field was valid.
    pub fn after_valid_conv(&self, k: usize) -> Mask {
        let shrink = k.saturating_sub(1);
        Mask {
            lens: self.lens.iter().map(|l| l.saturating_sub(shrink)).collect(),
            max_len: self.max_len.saturating_sub(shrink),
        }
    }
}
