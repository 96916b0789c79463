//! Dense row-major tensors over `f64`.
//!
//! Shapes are explicit `Vec<usize>` dimension lists; data is a flat
//! row-major buffer whose length always equals the shape product. Scalars
//! are represented as shape `[1]`. Everything is 64-bit floating point:
//! gradient checking against central finite differences needs the headroom.

use std::fmt;

/// Errors produced by tensor kernels and the compute graph.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Input shapes do not conform to the kernel's contract.
    ShapeMismatch {
        kernel: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// Data buffer length does not match the shape product.
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    /// A softmax row had every key masked where the caller declared that
    /// impossible.
    FullyMaskedRow { row: usize },
    /// Cross entropy was asked to average over zero active positions.
    EmptyLossMask,
    /// `backward` was called on a non-scalar node.
    NonScalarLoss { shape: Vec<usize> },
    /// A non-finite value surfaced while finite checks were enabled.
    NonFinite { kernel: &'static str },
    /// Catch-all for contract violations (bad ids, bad hyperparameters, ...).
    InvalidArgument(String),
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { kernel, lhs, rhs } => {
                write!(f, "{kernel}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            TensorError::DataLength {
                shape,
                expected,
                got,
            } => write!(
                f,
                "data length {got} does not match shape {shape:?} (expected {expected})"
            ),
            TensorError::FullyMaskedRow { row } => {
                write!(f, "softmax row {row} is fully masked")
            }
            TensorError::EmptyLossMask => write!(f, "all positions ignored in loss"),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            TensorError::NonFinite { kernel } => {
                write!(f, "{kernel}: produced a non-finite value")
            }
            TensorError::InvalidArgument(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense multi-dimensional array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and a row-major buffer.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        let t = Tensor { shape, data };
        debug_assert!(t.is_finite(), "Tensor::from_vec given non-finite data");
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D convenience constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(vec![rows, cols], data)
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extract the single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            })
        }
    }

    /// View as a `(rows, cols)` matrix. 1-D tensors count as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(TensorError::ShapeMismatch {
                kernel: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error unless every stored value is finite.
    pub fn assert_finite(&self, kernel: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { kernel })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data_length() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(3.5).item().unwrap(), 3.5);
        assert!(Tensor::zeros(vec![2]).item().is_err());
    }

    #[test]
    fn dims2_accepts_vectors_as_rows() {
        assert_eq!(Tensor::zeros(vec![4]).dims2().unwrap(), (1, 4));
        assert_eq!(Tensor::zeros(vec![3, 4]).dims2().unwrap(), (3, 4));
        assert!(Tensor::zeros(vec![2, 2, 2]).dims2().is_err());
    }

    #[test]
    fn finite_scan() {
        let mut t = Tensor::zeros(vec![3]);
        assert!(t.assert_finite("test").is_ok());
        t.data_mut()[1] = f64::NAN;
        assert!(t.assert_finite("test").is_err());
    }
}
