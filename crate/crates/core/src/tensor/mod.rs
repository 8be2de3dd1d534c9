//! Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//!
//! Training and attacks run in `f32`. The `f64` instantiation exists for
//! gradient checking against central finite differences.

mod conv;
mod gradcheck;
mod tape;

pub use conv::{conv2d_direct, conv_output_len};
pub use gradcheck::{finite_diff_grad, relative_error, GradCheckReport};
pub use tape::{Gradients, Reduction, Tape, Var};
pub(crate) use tape::softmax_xent_rows as tape_softmax_xent_rows;

use std::fmt;

use num_traits::{Float, NumCast};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidShape { op: &'static str, msg: String },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable is detached: {0}")]
    Detached(&'static str),
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("targets are not one-hot (row {row})")]
    NotOneHot { row: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Element precision tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

/// Floating-point element type usable inside tensors and on the tape.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    const DTYPE: DType;

    /// Direct-loop convolution is used for this precision (bit-reproducible
    /// summation order); otherwise im2col + GEMM.
    const DIRECT_CONV: bool;

    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable")
    }

    fn to_f64(self) -> f64 {
        <f64 as NumCast>::from(self).expect("finite cast")
    }

    /// `C = alpha * A B + beta * C` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    const DIRECT_CONV: bool = false;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        check_extent(c.len(), m, n, rsc, csc);
        // SAFETY: extents checked above; c does not alias a or b (distinct borrows).
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    const DIRECT_CONV: bool = true;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_extent(a.len(), m, k, rsa, csa);
        check_extent(b.len(), k, n, rsb, csb);
        check_extent(c.len(), m, n, rsc, csc);
        // SAFETY: extents checked above; c does not alias a or b (distinct borrows).
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            );
        }
    }
}

/// An n-dimensional array stored flat in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        let head = &self.data[..self.data.len().min(PREVIEW)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn from_f64_slice(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading-dimension slice.
    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Copy of samples `range` along the leading dimension.
    pub fn slice_batch(&self, range: std::ops::Range<usize>) -> Self {
        let per = self.sample_len();
        let mut shape = self.shape.clone();
        shape[0] = range.len();
        Self {
            shape,
            data: self.data[range.start * per..range.end * per].to_vec(),
        }
    }

    /// Gathers the listed samples along the leading dimension.
    pub fn gather_batch(&self, indices: &[usize]) -> Self {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    /// Concatenates tensors along the leading dimension.
    pub fn concat_batch(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat_batch",
            msg: "no parts".into(),
        })?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_batch",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            batch += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Self { shape, data })
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let per = self.sample_len();
        &self.data[i * per..(i + 1) * per]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let per = self.sample_len();
        &mut self.data[i * per..(i + 1) * per]
    }

    /// Index of the largest entry in each row of a `(batch, k)` tensor.
    pub fn argmax_rows(&self) -> Vec<usize> {
        let k = self.sample_len();
        self.data
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// One-hot encodes class ids into a `(batch, num_classes)` tensor.
pub fn one_hot<T: Scalar>(labels: &[usize], num_classes: usize) -> Tensor<T> {
    let mut t = Tensor::zeros([labels.len(), num_classes]);
    for (i, &c) in labels.iter().enumerate() {
        t.data[i * num_classes + c] = T::one();
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        let err = Tensor::<f32>::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { len: 5, .. }));
    }

    #[test]
    fn reshape_checks_element_count() {
        let t = Tensor::<f64>::zeros([2, 3]);
        assert_eq!(t.clone().reshape([3, 2]).unwrap().shape(), &[3, 2]);
        assert!(t.reshape([4, 2]).is_err());
    }

    #[test]
    fn batch_helpers() {
        let t = Tensor::<f32>::from_fn([3, 2], |i| i as f32);
        assert_eq!(t.slice_batch(1..3).data(), &[2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.gather_batch(&[2, 0]).data(), &[4.0, 5.0, 0.0, 1.0]);
        let c = Tensor::concat_batch(&[t.slice_batch(0..1), t.slice_batch(1..3)]).unwrap();
        assert_eq!(c, t);
        assert_eq!(t.argmax_rows(), vec![1, 1, 1]);
    }

    #[test]
    fn one_hot_rows() {
        let t: Tensor<f32> = one_hot(&[2, 0], 3);
        assert_eq!(t.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
