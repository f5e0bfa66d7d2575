//! Dense row-major tensors of `f64`.
//!
//! A [`Tensor`] is a plain value: shape plus flat data. Anything that needs a
//! gradient lives on a [`crate::tape::Tape`] and is addressed by a
//! [`crate::tape::Var`].

use std::fmt;

use thiserror::Error;

/// Largest rank accepted by [`Tensor::new`].
pub const MAX_RANK: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} values were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape {0:?}: dims must be positive and rank at most 3")]
    InvalidShape(Vec<usize>),
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of range for length {len}")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape(shape.to_vec()));
        }
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![], vec![value])
    }

    /// A `1 × n` row.
    pub fn row(values: &[f64]) -> Self {
        Tensor::from_parts(vec![1, values.len()], values.to_vec())
    }

    /// Builds an `m × n` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(TensorError::Shape {
                op: "from_rows",
                left: vec![n],
                right: vec![bad.len()],
            });
        }
        Tensor::new(&[m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Views the tensor as a matrix: rank 0 is `1 × 1`, rank 1 is `1 × n`.
    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        matrix_dims(&self.shape)
    }

    pub fn rows(&self) -> usize {
        self.matrix_dims().map_or(0, |(m, _)| m)
    }

    pub fn cols(&self) -> usize {
        self.matrix_dims().map_or(0, |(_, n)| n)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn row_slice(&self, row: usize) -> &[f64] {
        let n = self.cols();
        &self.data[row * n..(row + 1) * n]
    }

    /// Returns the value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Reorders rows: output row `i` is input row `order[i]`.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        let (m, n) = self.matrix_dims().ok_or_else(|| TensorError::InvalidShape(self.shape.clone()))?;
        if order.len() != m {
            return Err(TensorError::Contract(format!(
                "permutation of length {} for {m} rows",
                order.len()
            )));
        }
        let mut data = Vec::with_capacity(m * n);
        for &r in order {
            if r >= m {
                return Err(TensorError::Index {
                    op: "permute_rows",
                    index: r,
                    len: m,
                });
            }
            data.extend_from_slice(&self.data[r * n..(r + 1) * n]);
        }
        Ok(Tensor::from_parts(vec![m, n], data))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    match *shape {
        [] => Some((1, 1)),
        [n] => Some((1, n)),
        [m, n] => Some((m, n)),
        _ => None,
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Four interleaved partial sums, so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
