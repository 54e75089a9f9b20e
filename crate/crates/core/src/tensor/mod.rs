//! Dense row-major tensors and the raw kernels layers are built from.

mod ops;

pub use ops::*;

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: expected a rank-{expected} tensor, got {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Shape,
    },
    #[error("{op}: output extent along {axis} is not integral ({extent} + 2*{pad} - {window} not divisible by {stride})")]
    NonIntegralExtent {
        op: &'static str,
        axis: &'static str,
        extent: usize,
        pad: usize,
        window: usize,
        stride: usize,
    },
    #[error("{op}: window {window} exceeds padded extent {padded}")]
    WindowTooLarge {
        op: &'static str,
        window: usize,
        padded: usize,
    },
    #[error("{op}: input has {got} channels, kernel expects {expected}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid shape {0:?}: every extent must be >= 1")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape} holds {expected} elements, buffer has {got}")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        got: usize,
    },
    #[error("keep probability {0} outside (0, 1]")]
    KeepProbability(f64),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

/// Ordered list of positive extents. 4-D activations are (batch, channels,
/// height, width).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(extents: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let extents = extents.into();
        if extents.is_empty() || extents.contains(&0) {
            return Err(TensorError::InvalidShape(extents));
        }
        Ok(Shape(extents))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Number of elements per leading-axis entry.
    pub fn row_len(&self) -> usize {
        self.0[1..].iter().product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "[{}]", parts.join("x"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(extents: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self, TensorError> {
        let shape = Shape::new(extents)?;
        if shape.numel() != data.len() {
            return Err(TensorError::LengthMismatch {
                expected: shape.numel(),
                got: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_f64(extents: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self, TensorError> {
        Self::from_vec(extents, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn zeros(extents: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        Self::full(extents, T::zero())
    }

    pub fn full(extents: impl Into<Vec<usize>>, value: T) -> Result<Self, TensorError> {
        let shape = Shape::new(extents)?;
        let data = vec![value; shape.numel()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros_like(other: &Tensor<T>) -> Self {
        Tensor {
            shape: other.shape.clone(),
            data: vec![T::zero(); other.data.len()],
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(
        extents: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        let shape = Shape::new(extents)?;
        let data = (0..shape.numel())
            .map(|_| T::of(rng.gen_range(lo..hi)))
            .collect();
        Ok(Tensor { shape, data })
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn reshape(self, extents: impl Into<Vec<usize>>) -> Result<Self, TensorError> {
        let shape = Shape::new(extents)?;
        if shape.numel() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        let rows = self.dims()[0];
        if start >= end || end > rows {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                detail: format!("range {start}..{end} outside {rows} rows"),
            });
        }
        let row = self.shape.row_len();
        let mut dims = self.dims().to_vec();
        dims[0] = end - start;
        Tensor::from_vec(dims, self.data[start * row..end * row].to_vec())
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self, TensorError> {
        let (rows, cols) = self.matrix_dims("slice_cols")?;
        if start >= end || end > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                detail: format!("range {start}..{end} outside {cols} columns"),
            });
        }
        let width = end - start;
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&self.data[r * cols + start..r * cols + end]);
        }
        Tensor::from_vec(vec![rows, width], out)
    }

    /// Stacks tensors along the leading axis. Trailing extents must agree.
    pub fn concat_rows(parts: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            detail: "no parts".into(),
        })?;
        let tail = &first.dims()[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.dims()[1..] != tail {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += p.dims()[0];
            data.extend_from_slice(&p.data);
        }
        let mut dims = first.dims().to_vec();
        dims[0] = rows;
        Tensor::from_vec(dims, data)
    }

    /// Concatenates rank-2 tensors with equal row counts along the columns.
    pub fn concat_cols(parts: &[Tensor<T>]) -> Result<Self, TensorError> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            detail: "no parts".into(),
        })?;
        let (rows, _) = first.matrix_dims("concat_cols")?;
        let mut width = 0;
        for p in parts {
            let (r, c) = p.matrix_dims("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                });
            }
            width += c;
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                let c = p.dims()[1];
                data.extend_from_slice(&p.data[r * c..(r + 1) * c]);
            }
        }
        Tensor::from_vec(vec![rows, width], data)
    }

    pub(crate) fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.dims() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                got: self.shape.clone(),
            }),
        }
    }

    fn check_same(&self, other: &Tensor<T>, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self, TensorError> {
        self.check_same(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self, TensorError> {
        self.check_same(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<(), TensorError> {
        self.check_same(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// `self -= alpha * other`
    pub fn sub_scaled_assign(&mut self, alpha: T, other: &Tensor<T>) -> Result<(), TensorError> {
        self.check_same(other, "sub_scaled_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a - alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v * alpha).collect(),
        }
    }

    pub fn div_scalar_assign(&mut self, divisor: T) {
        for v in &mut self.data {
            *v = *v / divisor;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.as_f64().abs()))
    }

    /// max |self - other| / max |other|, the normwise relative error used by
    /// the gradient oracles. Returns the absolute error when `other` is zero.
    pub fn rel_err(&self, other: &Tensor<T>) -> Result<f64, TensorError> {
        self.check_same(other, "rel_err")?;
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()));
        let scale = other.max_abs();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_rejects_zero_extent() {
        assert!(Shape::new(vec![2, 0]).is_err());
        assert!(Shape::new(Vec::<usize>::new()).is_err());
        assert_eq!(Shape::new(vec![2, 3]).unwrap().numel(), 6);
    }

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::<f64>::from_vec(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { expected: 4, got: 3, .. }));
    }

    #[test]
    fn no_implicit_broadcasting() {
        let a = Tensor::<f64>::zeros(vec![2, 3]).unwrap();
        let b = Tensor::<f64>::zeros(vec![1, 3]).unwrap();
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn column_concat_inverts_slicing() {
        let t = Tensor::<f64>::from_f64(vec![2, 4], &[0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        let l = t.slice_cols(0, 1).unwrap();
        let r = t.slice_cols(1, 4).unwrap();
        assert_eq!(Tensor::concat_cols(&[l, r]).unwrap(), t);
        let top = t.slice_rows(0, 1).unwrap();
        let bottom = t.slice_rows(1, 2).unwrap();
        assert_eq!(Tensor::concat_rows(&[top, bottom]).unwrap(), t);
    }
}
