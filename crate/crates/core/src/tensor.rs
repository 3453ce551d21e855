//! Dense rank-4 NCHW tensor.

use crate::error::{Error, Result};

/// Shape of an NCHW tensor: `[batch, channels, height, width]`.
pub type Dims = [usize; 4];

/// Contiguous row-major `f32` tensor laid out batch → channel → row → column.
///
/// The shape is fixed at construction. Element data may be mutated in place
/// through [`Tensor::data_mut`], but never resized.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Dims,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Dims, data: Vec<f32>) -> Result<Self> {
        let len = numel(dims);
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {:?} ({} elements)",
                data.len(),
                dims,
                len
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: Dims, value: f32) -> Self {
        Tensor {
            dims,
            data: vec![value; numel(dims)],
        }
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` for every element.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize, usize) -> f32) -> Self {
        let [n, c, h, w] = dims;
        let mut data = Vec::with_capacity(numel(dims));
        for bi in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(bi, ci, y, x));
                    }
                }
            }
        }
        Tensor { dims, data }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn batch(&self) -> usize {
        self.dims[0]
    }

    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, value: f32) {
        let i = self.offset(n, c, y, x);
        self.data[i] = value;
    }

    /// One `h × w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let hw = self.dims[2] * self.dims[3];
        let start = (n * self.dims[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Channels `start..start + len` of every batch item, as a new tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims;
        if start + len > c {
            return Err(Error::Shape(format!(
                "channel range {}..{} out of bounds for {} channels",
                start,
                start + len,
                c
            )));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * len * hw);
        for bi in 0..n {
            let base = (bi * c + start) * hw;
            data.extend_from_slice(&self.data[base..base + len * hw]);
        }
        Ok(Tensor {
            dims: [n, len, h, w],
            data,
        })
    }

    /// Splits along channels into `[0, at)` and `[at, C)`.
    pub fn split_channels(&self, at: usize) -> Result<(Tensor, Tensor)> {
        let c = self.dims[1];
        if at > c {
            return Err(Error::Shape(format!(
                "split point {at} exceeds {c} channels"
            )));
        }
        Ok((self.narrow_channels(0, at)?, self.narrow_channels(at, c - at)?))
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "cannot add {:?} and {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn numel(dims: Dims) -> usize {
    dims.iter().product()
}
