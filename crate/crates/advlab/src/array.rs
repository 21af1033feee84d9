//! Shape-tagged contiguous `f64` array.
//!
//! `DenseArray` is the one value type that crosses module boundaries: it
//! carries image batches, logits, gradients and parameter tensors. Data is
//! row-major; every constructor checks that the element count matches the
//! shape and that all values are finite, so downstream code never has to
//! re-validate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous row-major `f64` tensor with an explicit shape.
///
/// The first dimension is the batch dimension wherever a batch is meant;
/// a zero-length batch is allowed, all other dimensions must be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(try_from = "ArrayRepr", into = "ArrayRepr")]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayRepr {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<ArrayRepr> for DenseArray {
    type Error = Error;
    fn try_from(r: ArrayRepr) -> Result<Self> {
        DenseArray::new(r.shape, r.data)
    }
}

impl From<DenseArray> for ArrayRepr {
    fn from(a: DenseArray) -> Self {
        ArrayRepr { shape: a.shape, data: a.data }
    }
}

impl DenseArray {
    /// Builds an array, validating shape/data agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().skip(1).any(|&d| d == 0) {
            return Err(Error::config(format!(
                "non-leading zero dimension in shape {shape:?}"
            )));
        }
        if expected != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} wants {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("array element {pos}")));
        }
        Ok(Self { shape, data })
    }

    /// All-zero array of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension; 1 for rank-0-like scalars is not a thing
    /// here, shapes always have rank >= 1.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per row (product of the non-leading dimensions).
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Borrow row `i` of the leading dimension.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Shape of a single row, i.e. the non-leading dimensions.
    pub fn row_shape(&self) -> Vec<usize> {
        self.shape[1..].to_vec()
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Elementwise map into a fresh validated array.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shaped arrays.
    pub fn zip_with(&self, other: &DenseArray, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::config(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.shape.clone(), data)
    }

    /// `self * s` elementwise.
    pub fn scale(&self, s: f64) -> Result<Self> {
        self.map(|v| v * s)
    }

    /// Largest absolute value; 0 for an empty array.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Stack a subset of rows (by index) into a new batch.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::input(format!("row index {i} out of {}", self.rows())));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::new(shape, data)
    }
}

/// Sign with `sgn(0) = 0`.
pub fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_mismatch() {
        assert!(matches!(
            DenseArray::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(
            DenseArray::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            DenseArray::new(vec![1], vec![f64::INFINITY]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn empty_batch_is_allowed() {
        let a = DenseArray::new(vec![0, 3], vec![]).unwrap();
        assert_eq!(a.rows(), 0);
        assert_eq!(a.row_len(), 3);
    }

    #[test]
    fn rejects_interior_zero_dim() {
        assert!(DenseArray::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn row_access() {
        let a = DenseArray::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(a.row(1), &[4., 5., 6.]);
        let sel = a.select_rows(&[1, 0]).unwrap();
        assert_eq!(sel.data(), &[4., 5., 6., 1., 2., 3.]);
    }

    #[test]
    fn sgn_of_zero_is_zero() {
        assert_eq!(sgn(0.0), 0.0);
        assert_eq!(sgn(-0.0), 0.0);
        assert_eq!(sgn(3.5), 1.0);
        assert_eq!(sgn(-0.1), -1.0);
    }
}
